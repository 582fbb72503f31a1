#include "maskdoor/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"

namespace maskdoor::data {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// --------------------------- synthetic shapes ------------------------------

namespace {

const char* kShapeNames[6] = {"circle", "square", "triangle", "diamond", "ring", "cross"};

const float kPalette[6][3] = {
    {0.90f, 0.20f, 0.20f}, {0.20f, 0.45f, 0.90f}, {0.95f, 0.85f, 0.20f},
    {0.20f, 0.80f, 0.35f}, {0.75f, 0.30f, 0.85f}, {0.95f, 0.55f, 0.15f},
};

struct ShapeExtent {
    int min_i = 1 << 30, min_j = 1 << 30, max_i = -1, max_j = -1;
    void grow(int i, int j) {
        min_i = std::min(min_i, i);
        min_j = std::min(min_j, j);
        max_i = std::max(max_i, i);
        max_j = std::max(max_j, j);
    }
    bool empty() const { return max_i < 0; }
    int w() const { return max_j - min_j + 1; }
    int h() const { return max_i - min_i + 1; }
};

bool inside_shape(int kind, double x, double y, double cx, double cy, double hw, double hh) {
    double nx = (x - cx) / hw, ny = (y - cy) / hh;
    switch (kind) {
        case 0: return nx * nx + ny * ny <= 1.0;                       // circle
        case 1: return std::fabs(nx) <= 1.0 && std::fabs(ny) <= 1.0;   // square
        case 2: {                                                       // triangle (up)
            if (ny < -1.0 || ny > 1.0) return false;
            double half = (ny + 1.0) / 2.0;  // width grows toward the base
            return std::fabs(nx) <= half;
        }
        case 3: return std::fabs(nx) + std::fabs(ny) <= 1.0;           // diamond
        case 4: {                                                       // ring
            double r2 = nx * nx + ny * ny;
            return r2 <= 1.0 && r2 >= 0.30;
        }
        case 5:                                                         // cross
            return (std::fabs(nx) <= 0.34 && std::fabs(ny) <= 1.0) ||
                   (std::fabs(ny) <= 0.34 && std::fabs(nx) <= 1.0);
    }
    return false;
}

}  // namespace

Dataset gen_synthetic(int n, int num_classes, int image_size, uint64_t seed,
                      const std::string& split) {
    if (n < 0) throw ValidationError("gen_synthetic: n must be >= 0");
    if (num_classes < 2 || num_classes > 6)
        throw ValidationError("gen_synthetic: num_classes must lie in [2,6]");
    if (image_size < 16) throw ValidationError("gen_synthetic: image_size must be >= 16");

    Dataset ds;
    ds.manifest.split = split;
    ds.manifest.generator = "synthetic-v1";
    ds.manifest.seed = seed;
    for (int c = 0; c < num_classes; ++c) ds.manifest.classes.push_back(kShapeNames[c]);

    Rng root(seed);
    const int S = image_size;
    const int smin = std::max(10, int(S * 0.18));
    const int smax = std::max(smin + 2, int(S * 0.42));

    for (int idx = 0; idx < n; ++idx) {
        Rng rng = root.substream("synth", uint64_t(idx));
        Image img(S, S, 3);

        // Textured background: grayish base, mild gradient, per-pixel noise.
        float base = float(rng.uniform(0.30, 0.70));
        float tilt_x = float(rng.uniform(-0.12, 0.12));
        float tilt_y = float(rng.uniform(-0.12, 0.12));
        float chan_off[3] = {float(rng.uniform(-0.06, 0.06)),
                             float(rng.uniform(-0.06, 0.06)),
                             float(rng.uniform(-0.06, 0.06))};
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                float v = base + tilt_x * (float(j) / S - 0.5f) + tilt_y * (float(i) / S - 0.5f);
                for (int ch = 0; ch < 3; ++ch) {
                    float noise = float(rng.uniform(-0.03, 0.03));
                    img.at(ch, i, j) = std::clamp(v + chan_off[ch] + noise, 0.0f, 1.0f);
                }
            }

        std::vector<CornerBox> boxes;
        int count = 1 + int(rng.uniform_int(4));
        for (int obj = 0; obj < count; ++obj) {
            int cls = int(rng.uniform_int(uint64_t(num_classes)));
            CornerBox placed;
            bool ok = false;
            for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
                double w = rng.uniform(smin, smax);
                double h = rng.uniform(smin, smax);
                double x0 = rng.uniform(1.0, S - 1.0 - w);
                double y0 = rng.uniform(1.0, S - 1.0 - h);
                placed = CornerBox{cls, x0, y0, x0 + w, y0 + h};
                ok = true;
                for (const auto& b : boxes)
                    if (core::iou(placed, b) >= 0.3) ok = false;
            }
            if (!ok) continue;

            float color[3];
            for (int ch = 0; ch < 3; ++ch)
                color[ch] = std::clamp(
                    kPalette[cls][ch] + float(rng.uniform(-0.06, 0.06)), 0.0f, 1.0f);

            double cx = (placed.x_min + placed.x_max) / 2.0;
            double cy = (placed.y_min + placed.y_max) / 2.0;
            double hw = placed.width() / 2.0, hh = placed.height() / 2.0;
            ShapeExtent ext;
            for (int i = int(placed.y_min); i <= int(placed.y_max) && i < S; ++i)
                for (int j = int(placed.x_min); j <= int(placed.x_max) && j < S; ++j) {
                    if (i < 0 || j < 0) continue;
                    if (!inside_shape(cls, j + 0.5, i + 0.5, cx, cy, hw, hh)) continue;
                    ext.grow(i, j);
                    for (int ch = 0; ch < 3; ++ch) {
                        float jitter = float(rng.uniform(-0.02, 0.02));
                        img.at(ch, i, j) = std::clamp(color[ch] + jitter, 0.0f, 1.0f);
                    }
                }
            if (ext.empty() || ext.w() < 8 || ext.h() < 8) continue;
            // Ground truth from raster extent; half-open box covering exactly
            // the drawn pixels.
            boxes.push_back(CornerBox{cls, double(ext.min_j), double(ext.min_i),
                                      double(ext.max_j + 1), double(ext.max_i + 1)});
        }

        ImageRecord rec;
        char name[64];
        std::snprintf(name, sizeof(name), "images/%06d.mdim", idx);
        rec.file = name;
        rec.boxes = boxes;
        ds.manifest.images.push_back(rec);
        ds.samples.emplace_back(std::move(img), boxes);
    }
    return ds;
}

// ------------------------------ image io -----------------------------------

namespace {

constexpr uint32_t kMdimMagic = 0x4d49444dU;  // "MDIM"
constexpr uint32_t kMdimVersion = 1;

}  // namespace

void write_mdim(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image: " + path);
    uint32_t header[3] = {kMdimMagic, kMdimVersion, 0};
    int32_t dims[3] = {img.h, img.w, img.c};
    os.write(reinterpret_cast<const char*>(header), 8);
    os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    os.write(reinterpret_cast<const char*>(img.px.data()),
             std::streamsize(img.px.size() * sizeof(float)));
    if (!os) throw std::runtime_error("short write: " + path);
}

Image read_mdim(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    uint32_t magic = 0, version = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    is.read(reinterpret_cast<char*>(&version), 4);
    if (!is || magic != kMdimMagic)
        throw std::runtime_error("not a maskdoor image (bad magic): " + path);
    if (version != kMdimVersion)
        throw std::runtime_error("unsupported image version " + std::to_string(version) +
                                 ": " + path);
    int32_t dims[3];
    is.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!is || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw std::runtime_error("corrupt image header: " + path);
    Image img(dims[0], dims[1], dims[2]);
    is.read(reinterpret_cast<char*>(img.px.data()),
            std::streamsize(img.px.size() * sizeof(float)));
    if (!is) throw std::runtime_error("truncated image data: " + path);
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.c != 3) throw ValidationError("write_ppm: need 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image: " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    for (int i = 0; i < img.h; ++i)
        for (int j = 0; j < img.w; ++j)
            for (int ch = 0; ch < 3; ++ch) {
                int v = int(std::lround(std::clamp(img.at(ch, i, j), 0.0f, 1.0f) * 255.0f));
                os.put(char(v));
            }
}

Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw std::runtime_error("not a binary PPM: " + path);
    auto next_int = [&is, &path]() {
        // Skip whitespace and '#' comments between header fields.
        int c;
        while ((c = is.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        int v;
        if (!(is >> v)) throw std::runtime_error("bad PPM header: " + path);
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw std::runtime_error("unsupported PPM maxval: " + path);
    is.get();  // single whitespace before raster
    Image img(h, w, 3);
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int i = 0; i < h; ++i) {
        is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!is) throw std::runtime_error("truncated PPM raster: " + path);
        for (int j = 0; j < w; ++j)
            for (int ch = 0; ch < 3; ++ch)
                img.at(ch, i, j) = float(row[size_t(j) * 3 + ch]) / 255.0f;
    }
    return img;
}

void write_pgm(const std::string& path, const std::vector<float>& values, int h, int w) {
    if (int(values.size()) != h * w) throw ValidationError("write_pgm: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (float v : values) {
        int x = int(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        os.put(char(x));
    }
}

// ------------------------- manifest serialization --------------------------

namespace {

ordered_json box_to_json(const CornerBox& b) {
    return ordered_json{{"class", b.class_id},
                        {"x_min", b.x_min},
                        {"y_min", b.y_min},
                        {"x_max", b.x_max},
                        {"y_max", b.y_max}};
}

CornerBox box_from_json(const nlohmann::json& j) {
    return CornerBox{j.at("class").get<int>(), j.at("x_min").get<double>(),
                     j.at("y_min").get<double>(), j.at("x_max").get<double>(),
                     j.at("y_max").get<double>()};
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& m) {
    ordered_json j;
    j["format_version"] = m.format_version;
    j["split"] = m.split;
    j["image_count"] = m.images.size();
    j["classes"] = m.classes;
    ordered_json prov;
    prov["generator"] = m.generator;
    prov["seed"] = m.seed;
    if (m.poison_spec) {
        const auto& p = *m.poison_spec;
        prov["poison"] = ordered_json{{"scenario", poison::to_string(p.scenario)},
                                      {"target_class", p.target_class},
                                      {"global_trigger_prob", p.global_trigger_prob},
                                      {"oga_min_frac", p.oga_min_frac},
                                      {"oga_triggers_per_image", p.oga_triggers_per_image},
                                      {"overlap_iou_threshold", p.overlap_iou_threshold},
                                      {"seed", p.seed}};
    } else {
        prov["poison"] = nullptr;
    }
    j["provenance"] = prov;
    j["images"] = ordered_json::array();
    for (const auto& rec : m.images) {
        ordered_json r;
        r["file"] = rec.file;
        r["boxes"] = ordered_json::array();
        for (size_t i = 0; i < rec.boxes.size(); ++i) {
            auto b = box_to_json(rec.boxes[i]);
            if (i < rec.difficult.size() && rec.difficult[i]) b["difficult"] = true;
            r["boxes"].push_back(b);
        }
        if (rec.poisoned) {
            r["poisoned"] = true;
            r["skipped"] = rec.skipped;
            r["used_global_trigger"] = rec.used_global_trigger;
            r["seed"] = rec.seed;
            r["trigger_boxes"] = ordered_json::array();
            for (const auto& b : rec.trigger_boxes) r["trigger_boxes"].push_back(box_to_json(b));
        }
        j["images"].push_back(r);
    }
    return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    DatasetManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
        throw std::runtime_error("unsupported manifest format_version " +
                                 std::to_string(m.format_version));
    m.split = j.at("split").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.generator = j.at("provenance").at("generator").get<std::string>();
    m.seed = j.at("provenance").at("seed").get<uint64_t>();
    if (!j.at("provenance").at("poison").is_null()) {
        const auto& p = j["provenance"]["poison"];
        poison::PoisonSpec spec;
        spec.scenario = poison::scenario_from_string(p.at("scenario").get<std::string>());
        spec.target_class = p.at("target_class").get<int>();
        spec.global_trigger_prob = p.at("global_trigger_prob").get<double>();
        spec.oga_min_frac = p.at("oga_min_frac").get<double>();
        spec.oga_triggers_per_image = p.at("oga_triggers_per_image").get<int>();
        spec.overlap_iou_threshold = p.at("overlap_iou_threshold").get<double>();
        spec.seed = p.at("seed").get<uint64_t>();
        m.poison_spec = spec;
    }
    for (const auto& rj : j.at("images")) {
        ImageRecord rec;
        rec.file = rj.at("file").get<std::string>();
        for (const auto& bj : rj.at("boxes")) {
            rec.boxes.push_back(box_from_json(bj));
            rec.difficult.push_back(bj.value("difficult", false) ? 1 : 0);
        }
        if (rj.value("poisoned", false)) {
            rec.poisoned = true;
            rec.skipped = rj.value("skipped", false);
            rec.used_global_trigger = rj.value("used_global_trigger", false);
            rec.seed = rj.value("seed", uint64_t(0));
            if (rj.contains("trigger_boxes"))
                for (const auto& bj : rj["trigger_boxes"])
                    rec.trigger_boxes.push_back(box_from_json(bj));
        }
        m.images.push_back(std::move(rec));
    }
    return m;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    if (ds.samples.size() != ds.manifest.images.size())
        throw ValidationError("save_dataset: manifest/sample count mismatch");
    fs::create_directories(fs::path(dir) / "images");
    for (size_t i = 0; i < ds.samples.size(); ++i)
        write_mdim((fs::path(dir) / ds.manifest.images[i].file).string(),
                   ds.samples[i].image);
    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw std::runtime_error("cannot write manifest in " + dir);
    os << manifest_to_json(ds.manifest);
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("no manifest.json in " + dir);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Dataset ds;
    ds.manifest = manifest_from_json(text);
    for (const auto& rec : ds.manifest.images) {
        Image img = read_mdim((fs::path(dir) / rec.file).string());
        ds.samples.emplace_back(std::move(img), rec.boxes);
    }
    return ds;
}

// ------------------------------ VOC parsing --------------------------------

namespace {

struct XmlNode {
    std::string name;
    std::string text;
    std::vector<XmlNode> children;

    const XmlNode* child(const std::string& n) const {
        for (const auto& c : children)
            if (c.name == n) return &c;
        return nullptr;
    }
};

class XmlParser {
public:
    explicit XmlParser(const std::string& text) : s_(text) {}

    XmlNode parse_document() {
        skip_prolog();
        XmlNode root = parse_element();
        return root;
    }

private:
    const std::string& s_;
    size_t pos_ = 0;
    int line_ = 1;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ValidationError("XML parse error at line " + std::to_string(line_) + ": " + msg);
    }

    char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

    char get() {
        if (pos_ >= s_.size()) fail("unexpected end of document");
        char c = s_[pos_++];
        if (c == '\n') ++line_;
        return c;
    }

    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) get();
    }

    bool try_consume(const std::string& token) {
        if (s_.compare(pos_, token.size(), token) != 0) return false;
        for (size_t i = 0; i < token.size(); ++i) get();
        return true;
    }

    void skip_prolog() {
        for (;;) {
            skip_ws();
            if (try_consume("<?")) {
                while (!try_consume("?>")) get();
            } else if (try_consume("<!--")) {
                while (!try_consume("-->")) get();
            } else {
                return;
            }
        }
    }

    std::string read_name() {
        std::string name;
        while (pos_ < s_.size()) {
            char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ||
                c == ':' || c == '.') {
                name.push_back(get());
            } else {
                break;
            }
        }
        if (name.empty()) fail("expected element name");
        return name;
    }

    std::string decode_entities(const std::string& raw) {
        std::string out;
        for (size_t i = 0; i < raw.size(); ++i) {
            if (raw[i] != '&') {
                out.push_back(raw[i]);
                continue;
            }
            size_t semi = raw.find(';', i);
            if (semi == std::string::npos) fail("unterminated entity");
            std::string ent = raw.substr(i + 1, semi - i - 1);
            if (ent == "lt") out.push_back('<');
            else if (ent == "gt") out.push_back('>');
            else if (ent == "amp") out.push_back('&');
            else if (ent == "quot") out.push_back('"');
            else if (ent == "apos") out.push_back('\'');
            else fail("unknown entity &" + ent + ";");
            i = semi;
        }
        return out;
    }

    XmlNode parse_element() {
        skip_ws();
        if (peek() != '<') fail("expected '<'");
        get();
        XmlNode node;
        node.name = read_name();
        // Attributes are tolerated and discarded.
        for (;;) {
            skip_ws();
            char c = peek();
            if (c == '/') {
                get();
                if (get() != '>') fail("malformed self-closing tag <" + node.name + ">");
                return node;
            }
            if (c == '>') {
                get();
                break;
            }
            read_name();
            skip_ws();
            if (peek() == '=') {
                get();
                skip_ws();
                char q = get();
                if (q != '"' && q != '\'') fail("expected quoted attribute value");
                while (get() != q) {
                }
            }
        }

        std::string text;
        for (;;) {
            if (pos_ >= s_.size()) fail("unclosed element <" + node.name + ">");
            if (peek() == '<') {
                if (s_.compare(pos_, 4, "<!--") == 0) {
                    try_consume("<!--");
                    while (!try_consume("-->")) get();
                    continue;
                }
                if (s_.compare(pos_, 2, "</") == 0) {
                    try_consume("</");
                    std::string closing = read_name();
                    if (closing != node.name)
                        fail("mismatched closing tag </" + closing + "> for <" + node.name + ">");
                    skip_ws();
                    if (get() != '>') fail("malformed closing tag");
                    node.text = decode_entities(text);
                    return node;
                }
                node.children.push_back(parse_element());
            } else {
                text.push_back(get());
            }
        }
    }
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double require_number(const XmlNode& parent, const std::string& name) {
    const XmlNode* n = parent.child(name);
    if (!n) throw ValidationError("VOC annotation: <" + parent.name + "> missing <" + name + ">");
    std::string t = trim(n->text);
    try {
        size_t used = 0;
        double v = std::stod(t, &used);
        if (used != t.size()) throw std::invalid_argument(t);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("VOC annotation: <" + name + "> is not a number: '" + t + "'");
    }
}

}  // namespace

std::vector<VocObject> parse_voc(const std::string& xml,
                                 const std::vector<std::string>& class_map) {
    XmlParser parser(xml);
    XmlNode root = parser.parse_document();
    if (root.name != "annotation")
        throw ValidationError("VOC annotation: root element is <" + root.name +
                              ">, expected <annotation>");

    std::map<std::string, int> ids;
    for (size_t i = 0; i < class_map.size(); ++i) ids[class_map[i]] = int(i);

    std::vector<VocObject> out;
    for (const auto& child : root.children) {
        if (child.name != "object") continue;
        const XmlNode* name = child.child("name");
        if (!name) throw ValidationError("VOC annotation: <object> missing <name>");
        std::string cls = trim(name->text);
        auto it = ids.find(cls);
        if (it == ids.end())
            throw ValidationError("VOC annotation: unknown class '" + cls + "'");
        const XmlNode* bnd = child.child("bndbox");
        if (!bnd) throw ValidationError("VOC annotation: <object> missing <bndbox>");
        VocObject obj;
        obj.box.class_id = it->second;
        obj.box.x_min = require_number(*bnd, "xmin");
        obj.box.y_min = require_number(*bnd, "ymin");
        obj.box.x_max = require_number(*bnd, "xmax");
        obj.box.y_max = require_number(*bnd, "ymax");
        if (obj.box.x_max <= obj.box.x_min || obj.box.y_max <= obj.box.y_min)
            throw ValidationError("VOC annotation: degenerate bndbox for '" + cls + "'");
        if (const XmlNode* d = child.child("difficult")) obj.difficult = trim(d->text) == "1";
        out.push_back(obj);
    }
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ValidationError("resize: bad target size");
    Image out(out_h, out_w, img.c);
    double sy = double(img.h) / out_h, sx = double(img.w) / out_w;
    for (int i = 0; i < out_h; ++i) {
        double fy = (i + 0.5) * sy - 0.5;
        int y0 = std::clamp(int(std::floor(fy)), 0, img.h - 1);
        int y1 = std::min(y0 + 1, img.h - 1);
        double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int j = 0; j < out_w; ++j) {
            double fx = (j + 0.5) * sx - 0.5;
            int x0 = std::clamp(int(std::floor(fx)), 0, img.w - 1);
            int x1 = std::min(x0 + 1, img.w - 1);
            double wx = std::clamp(fx - x0, 0.0, 1.0);
            for (int ch = 0; ch < img.c; ++ch) {
                double top = img.at(ch, y0, x0) * (1 - wx) + img.at(ch, y0, x1) * wx;
                double bot = img.at(ch, y1, x0) * (1 - wx) + img.at(ch, y1, x1) * wx;
                out.at(ch, i, j) = float(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Dataset load_voc_dataset(const std::string& annotation_dir, const std::string& image_dir,
                         const std::vector<std::string>& classes, int target_size) {
    std::vector<fs::path> xmls;
    for (const auto& e : fs::directory_iterator(annotation_dir))
        if (e.path().extension() == ".xml") xmls.push_back(e.path());
    std::sort(xmls.begin(), xmls.end());
    if (xmls.empty()) throw ValidationError("no .xml annotations in " + annotation_dir);

    Dataset ds;
    ds.manifest.split = "voc-import";
    ds.manifest.generator = "voc-import-v1";
    ds.manifest.classes = classes;

    for (const auto& xml_path : xmls) {
        fs::path img_path = fs::path(image_dir) / (xml_path.stem().string() + ".ppm");
        if (!fs::exists(img_path))
            throw ValidationError("missing image for annotation: " + img_path.string());
        std::ifstream is(xml_path);
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        auto objects = parse_voc(text, classes);
        Image raw = read_ppm(img_path.string());
        Image img = resize_bilinear(raw, target_size, target_size);
        double sx = double(target_size) / raw.w, sy = double(target_size) / raw.h;

        ImageRecord rec;
        rec.file = xml_path.stem().string();
        std::vector<CornerBox> boxes;
        for (const auto& o : objects) {
            CornerBox b = o.box;
            b.x_min *= sx;
            b.x_max *= sx;
            b.y_min *= sy;
            b.y_max *= sy;
            boxes.push_back(b);
            rec.difficult.push_back(o.difficult ? 1 : 0);
        }
        rec.boxes = boxes;
        ds.manifest.images.push_back(rec);
        ds.samples.emplace_back(std::move(img), boxes);
    }
    return ds;
}

}  // namespace maskdoor::data
