#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "../test_util.hpp"
#include "infobfr/error.hpp"
#include "infobfr/image.hpp"
#include "infobfr/tensor_grid.hpp"

using namespace infobfr;
using infobfr::testing::random_image;
using infobfr::testing::temp_dir;

namespace {

std::vector<uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an infobfr::Error";
  return ErrorKind::kRuntime;
}

}  // namespace

TEST(Image, RejectsOutOfRangeAndBadShapes) {
  EXPECT_THROW(Image(2, 2, 1, {0.f, 0.f, 0.f, 1.5f}), Error);
  EXPECT_THROW(Image(2, 2, 1, {0.f, 0.f, 0.f, std::nanf("")}), Error);
  EXPECT_THROW(Image(2, 2, 2, std::vector<float>(8, 0.f)), Error);
  EXPECT_THROW(Image(2, 2, 1, std::vector<float>(3, 0.f)), Error);
  EXPECT_THROW(Image(0, 2, 1, {}), Error);
}

TEST(Image, MakeClampedClampsAndZeroesNan) {
  const Image img = make_clamped_image(1, 3, 1, {-1.f, 2.f, std::nanf("")});
  EXPECT_EQ(img.data()[0], 0.f);
  EXPECT_EQ(img.data()[1], 1.f);
  EXPECT_EQ(img.data()[2], 0.f);
}

TEST(ImageIo, OnePixelWhiteAndBlack) {
  const auto dir = temp_dir("io_pixels");
  for (uint8_t v : {uint8_t{255}, uint8_t{0}}) {
    cv::Mat m(1, 1, CV_8UC3, cv::Scalar(v, v, v));
    const auto path = dir / "p.png";
    cv::imwrite(path.string(), m);
    const Image img = load_image(path);
    ASSERT_EQ(img.channels(), 3);
    for (float x : img.data()) EXPECT_EQ(x, v / 255.0f);
  }
}

TEST(ImageIo, GrayscalePreservesChannelCount) {
  const auto dir = temp_dir("io_gray");
  cv::Mat m(4, 5, CV_8UC1, cv::Scalar(17));
  cv::imwrite((dir / "g.png").string(), m);
  const Image img = load_image(dir / "g.png");
  EXPECT_EQ(img.channels(), 1);
  EXPECT_EQ(img.height(), 4);
  EXPECT_EQ(img.width(), 5);
  EXPECT_FLOAT_EQ(img.data()[0], 17 / 255.0f);
}

TEST(ImageIo, RoundTripWithinQuantizationBound) {
  const auto dir = temp_dir("io_roundtrip");
  const Image img = random_image(16, 16, 3, 7);
  save_image(img, dir / "r.png");
  const Image back = load_image(dir / "r.png");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(img.data()[i] - back.data()[i]), 1.0f / 255.0f);
}

TEST(ImageIo, MidGrayQuantizesTo128) {
  const auto dir = temp_dir("io_mid");
  save_image(Image::filled(3, 3, 3, 0.5f), dir / "m.png");
  const cv::Mat m = cv::imread((dir / "m.png").string(), cv::IMREAD_UNCHANGED);
  EXPECT_EQ(m.at<cv::Vec3b>(1, 1)[0], 128);
  EXPECT_EQ(load_image(dir / "m.png").data()[0], 128 / 255.0f);
}

TEST(ImageIo, SaveLoadSaveIsByteIdentical) {
  const auto dir = temp_dir("io_idem");
  save_image(random_image(9, 13, 3, 3), dir / "a.png");
  save_image(load_image(dir / "a.png"), dir / "b.png");
  EXPECT_EQ(read_bytes(dir / "a.png"), read_bytes(dir / "b.png"));
}

TEST(ImageIo, Errors) {
  EXPECT_EQ(kind_of([] { save_image(Image::filled(2, 2, 1, 0.f), ""); }), ErrorKind::kInvalidArgument);
  EXPECT_EQ(kind_of([] { load_image("/nonexistent/x.png"); }), ErrorKind::kMissingArtifact);
  const auto dir = temp_dir("io_err");
  std::ofstream(dir / "bad.png") << "not a png";
  EXPECT_EQ(kind_of([&] { load_image(dir / "bad.png"); }), ErrorKind::kInvalidArgument);
  cv::Mat deep(2, 2, CV_16UC1, cv::Scalar(1000));
  cv::imwrite((dir / "deep.png").string(), deep);
  EXPECT_EQ(kind_of([&] { load_image(dir / "deep.png"); }), ErrorKind::kInvalidArgument);
  EXPECT_EQ(kind_of([] { list_images("/nonexistent_dir"); }), ErrorKind::kMissingArtifact);
}

TEST(ImageIo, DirectoryListingIsLexicographic) {
  const auto dir = temp_dir("io_list");
  for (const char* name : {"b.png", "a.png", "c.png"}) save_image(Image::filled(2, 2, 1, 0.f), dir / name);
  std::ofstream(dir / "notes.txt") << "x";
  const auto files = list_images(dir);
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "a.png");
  EXPECT_EQ(files[2].filename(), "c.png");
}

TEST(Psnr, Examples) {
  const Image zero = Image::filled(8, 8, 3, 0.f);
  EXPECT_TRUE(std::isinf(psnr(zero, zero)));
  EXPECT_GT(psnr(zero, zero), 0.0);
  EXPECT_NEAR(psnr(zero, Image::filled(8, 8, 3, 1.f)), 0.0, 1e-12);
  EXPECT_NEAR(psnr(zero, Image::filled(8, 8, 3, 0.1f)), 20.0, 1e-5);
  EXPECT_THROW(psnr(zero, Image::filled(8, 8, 1, 0.f)), Error);
}

TEST(Psnr, SymmetricAndMatchesScalarOracle) {
  const Image a = random_image(8, 8, 3, 1), b = random_image(8, 8, 3, 2);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / mse), 1e-9);
}

TEST(Tensor, RoundTripAndLayout) {
  const Image img = random_image(5, 7, 3, 11);
  const auto t = to_tensor(img);
  ASSERT_EQ(t.sizes(), (std::vector<int64_t>{1, 3, 5, 7}));
  EXPECT_EQ(t[0][2][4][6].item<float>(), img.at(4, 6, 2));
  EXPECT_EQ(from_tensor(t[0]), img);
  EXPECT_EQ(from_batch(t).size(), 1u);
}

TEST(Tensor, GrayscaleMatchesBt601) {
  const Image img = random_image(3, 3, 3, 5);
  const Image g = to_grayscale(img);
  ASSERT_EQ(g.channels(), 1);
  const double expect = 0.299 * img.at(1, 2, 0) + 0.587 * img.at(1, 2, 1) + 0.114 * img.at(1, 2, 2);
  EXPECT_NEAR(g.at(1, 2, 0), expect, 1e-6);
}

TEST(TensorGrid, RejectsNonFiniteAndWrongRank) {
  EXPECT_THROW(TensorGrid(torch::zeros({2, 2})), Error);
  auto bad = torch::zeros({1, 1, 2, 2});
  bad[0][0][0][0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(TensorGrid{bad}, Error);
  const TensorGrid ok(torch::zeros({2, 3, 4, 5}));
  EXPECT_EQ(ok.channels(), 3);
  EXPECT_EQ(ok.width(), 5);
}
