#pragma once

#include <cstdint>
#include <vector>

#include "maskdoor/common.hpp"

namespace maskdoor::core {

// Box in center format [class, cx, cy, w, h]. Used at ingestion and
// serialization boundaries; all geometry runs on CornerBox.
struct CenterBox {
    int class_id = 0;
    double cx = 0, cy = 0;
    double w = 0, h = 0;
};

// Canonical box format: half-open in rasterization, closed in geometry.
struct CornerBox {
    int class_id = 0;
    double x_min = 0, y_min = 0;
    double x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }

    bool operator==(const CornerBox&) const = default;
};

CornerBox center_to_corner(const CenterBox& b);
CenterBox corner_to_center(const CornerBox& b);

// Intersection area; 0 for disjoint or edge-touching boxes.
double intersection_area(const CornerBox& a, const CornerBox& b);

// Intersection over union in [0,1]; class ids ignored.
double iou(const CornerBox& a, const CornerBox& b);

// True iff intersection area is strictly positive. Edge contact is not
// overlap, so chaining never propagates through zero-area touch.
bool overlaps(const CornerBox& a, const CornerBox& b);

// Rasterization rule shared with the mask builder: pixel (row i, col j) is
// covered iff x_min <= j < x_max and y_min <= i < y_max.
bool covers_pixel(const CornerBox& b, int row, int col);

// Planar CHW float image with all values in [0,1].
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<float> px;  // size c*h*w, channel-major

    Image() = default;
    Image(int height, int width, int channels, float fill = 0.0f)
        : h(height), w(width), c(channels),
          px(size_t(height) * width * channels, fill) {
        if (height <= 0 || width <= 0 || channels <= 0)
            throw ValidationError("Image: dimensions must be positive");
    }

    float& at(int ch, int i, int j) { return px[(size_t(ch) * h + i) * w + j]; }
    float at(int ch, int i, int j) const { return px[(size_t(ch) * h + i) * w + j]; }
    size_t size() const { return px.size(); }

    bool operator==(const Image&) const = default;
};

// Clamps a box to [0,w]x[0,h]; throws if nothing remains inside.
CornerBox clamp_to_bounds(const CornerBox& b, int height, int width);

// Image plus ground-truth boxes; boxes are clamped at construction so every
// downstream consumer can assume in-bounds geometry.
struct AnnotatedImage {
    Image image;
    std::vector<CornerBox> boxes;

    AnnotatedImage() = default;
    AnnotatedImage(Image img, std::vector<CornerBox> bs) : image(std::move(img)) {
        boxes.reserve(bs.size());
        for (const auto& b : bs) boxes.push_back(clamp_to_bounds(b, image.h, image.w));
    }
};

void validate_center_box(const CenterBox& b);
void validate_corner_box(const CornerBox& b);

}  // namespace maskdoor::core
