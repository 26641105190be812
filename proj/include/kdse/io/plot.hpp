#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kdse::io {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

class Canvas {
 public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});

  int width() const { return width_; }
  int height() const { return height_; }
  Rgb pixel(int x, int y) const;
  void set(int x, int y, Rgb c);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  /// 5x7 bitmap glyphs, `scale` pixels per font pixel; lowercase renders as uppercase.
  void text(int x, int y, const std::string& s, Rgb c, int scale = 1);
  static int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }

  void write_png(const std::string& path) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> rgb_;
};

struct Series {
  std::string label;
  std::vector<double> x, y;
  Rgb color{31, 119, 180};
};

struct Panel {
  std::string title;
  std::string x_label;
  std::vector<Series> series;
};

/// Lays out panels side by side with axes, ticks and a legend.
Canvas render_panels(const std::vector<Panel>& panels, int panel_width = 480, int panel_height = 360);

}  // namespace kdse::io
