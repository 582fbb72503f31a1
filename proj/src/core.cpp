#include "maskdoor/core.hpp"

#include <algorithm>
#include <cmath>

namespace maskdoor::core {

void validate_center_box(const CenterBox& b) {
    if (b.w <= 0 || b.h <= 0)
        throw ValidationError("CenterBox: width and height must be positive");
    if (b.class_id < 0) throw ValidationError("CenterBox: class_id must be >= 0");
}

void validate_corner_box(const CornerBox& b) {
    if (b.x_max <= b.x_min || b.y_max <= b.y_min)
        throw ValidationError("CornerBox: max coordinates must exceed min coordinates");
}

CornerBox center_to_corner(const CenterBox& b) {
    return CornerBox{b.class_id, b.cx - b.w / 2.0, b.cy - b.h / 2.0,
                     b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

CenterBox corner_to_center(const CornerBox& b) {
    return CenterBox{b.class_id, (b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0,
                     b.x_max - b.x_min, b.y_max - b.y_min};
}

double intersection_area(const CornerBox& a, const CornerBox& b) {
    double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0 || ih <= 0) return 0.0;
    return iw * ih;
}

double iou(const CornerBox& a, const CornerBox& b) {
    double inter = intersection_area(a, b);
    if (inter <= 0) return 0.0;
    double uni = a.area() + b.area() - inter;
    return inter / uni;
}

bool overlaps(const CornerBox& a, const CornerBox& b) {
    return intersection_area(a, b) > 0.0;
}

bool covers_pixel(const CornerBox& b, int row, int col) {
    return b.x_min <= col && col < b.x_max && b.y_min <= row && row < b.y_max;
}

CornerBox clamp_to_bounds(const CornerBox& b, int height, int width) {
    CornerBox r = b;
    r.x_min = std::clamp(r.x_min, 0.0, double(width));
    r.x_max = std::clamp(r.x_max, 0.0, double(width));
    r.y_min = std::clamp(r.y_min, 0.0, double(height));
    r.y_max = std::clamp(r.y_max, 0.0, double(height));
    if (r.x_max <= r.x_min || r.y_max <= r.y_min)
        throw ValidationError("box lies entirely outside image bounds");
    return r;
}

}  // namespace maskdoor::core
