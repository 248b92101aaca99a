#include "dhseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <cstring>
#include <stdexcept>

namespace dhseg {

namespace {

std::filesystem::path ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  return path;
}

}  // namespace

RgbImage read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  RgbImage out(rgb.rows, rgb.cols, 3);
  for (int y = 0; y < rgb.rows; ++y) std::memcpy(&out(y, 0, 0), rgb.ptr<std::uint8_t>(y), static_cast<size_t>(rgb.cols) * 3);
  return out;
}

void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw std::invalid_argument("write_rgb: expected 1 or 3 channels");
  }
  cv::Mat src(image.height(), image.width(), CV_8UC(image.channels()), const_cast<std::uint8_t*>(image.values().data()));
  cv::Mat out;
  if (image.channels() == 3) cv::cvtColor(src, out, cv::COLOR_RGB2BGR);
  else out = src;
  if (!cv::imwrite(ensure_parent(path).string(), out)) throw std::runtime_error("cannot write image: " + path.string());
}

BinaryMask read_mask(const std::filesystem::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw std::runtime_error("cannot read mask: " + path.string());
  BinaryMask out(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) out(y, x) = gray.at<std::uint8_t>(y, x) != 0;
  return out;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  cv::Mat out(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) out.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
  if (!cv::imwrite(ensure_parent(path).string(), out)) throw std::runtime_error("cannot write mask: " + path.string());
}

}  // namespace dhseg
