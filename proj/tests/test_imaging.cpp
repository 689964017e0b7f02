// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "attnocr/font.hpp"
#include "attnocr/image.hpp"
#include "support/otsu_oracle.hpp"

using namespace attnocr;
using attnocr::testing::otsu_oracle;
using attnocr::testing::random_histogram;

namespace {

GrayImage random_image(std::size_t w, std::size_t h, Rng& rng) {
  GrayImage img(w, h);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

GrayImage random_binary(std::size_t w, std::size_t h, double ink, Rng& rng) {
  GrayImage img(w, h);
  for (auto& p : img.pixels) p = rng.bernoulli(ink) ? kInk : kBackground;
  return img;
}

bool subset_ink(const GrayImage& a, const GrayImage& b) {
  for (std::size_t i = 0; i < a.pixels.size(); ++i)
    if (a.pixels[i] == kInk && b.pixels[i] != kInk) return false;
  return true;
}

std::size_t ink_count(const GrayImage& img) {
  return static_cast<std::size_t>(std::count(img.pixels.begin(), img.pixels.end(), kInk));
}

const std::u32string kCharset = U"abcdefghijklmnopqrst";

}  // namespace

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

TEST(Pgm, RoundTripIsBitExact) {
  Rng rng(1);
  const auto img = random_image(13, 7, rng);
  const auto bytes = encode_pgm(img);
  EXPECT_EQ(bytes.substr(0, 12), "P5\n13 7\n255\n");
  EXPECT_EQ(decode_pgm(bytes), img);
}

TEST(Pgm, HeaderCommentsAccepted) {
  const std::string bytes = std::string("P5 # comment\n2 # w\n1\n255\n") + '\x10' + '\x20';
  const auto img = decode_pgm(bytes);
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0x10, 0x20}));
}

TEST(Pgm, MalformedInputsThrowFormatError) {
  EXPECT_THROW(decode_pgm("P2\n1 1\n255\n0"), FormatError);
  EXPECT_THROW(decode_pgm("P5\n2 2\n255\nab"), FormatError);
  EXPECT_THROW(decode_pgm("P5\n2 2\n65535\n"), FormatError);
  EXPECT_THROW(decode_pgm("P5\n0 2\n255\n"), FormatError);
  EXPECT_THROW(read_pgm("/nonexistent/x.pgm"), IoError);
}

// ---------------------------------------------------------------------------
// Scaling, cropping, rotation
// ---------------------------------------------------------------------------

TEST(ScaleToHeight, IdentityAtTargetHeight) {
  Rng rng(2);
  const auto img = random_image(37, 64, rng);
  EXPECT_EQ(scale_to_height(img), img);
}

TEST(ScaleToHeight, ExactHalving) {
  Rng rng(3);
  const auto img = random_image(200, 128, rng);
  const auto out = scale_to_height(img);
  ASSERT_EQ(out.width, 100u);
  ASSERT_EQ(out.height, 64u);
  // Half-pixel centers put each output pixel at the center of a 2x2 input block.
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 100; ++x) {
      const double mean = (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) + img.at(2 * x, 2 * y + 1) +
                           img.at(2 * x + 1, 2 * y + 1)) / 4.0;
      EXPECT_EQ(out.at(x, y), to_byte(mean));
    }
}

TEST(ScaleToHeight, ConstantStaysConstantAndWidthLaw) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t w = 1 + rng.below(300), h = 1 + rng.below(200);
    const auto v = static_cast<std::uint8_t>(rng.below(256));
    const auto out = scale_to_height(GrayImage(w, h, v));
    EXPECT_EQ(out.height, 64u);
    const auto expect_w = std::max<long long>(8, std::llround(static_cast<double>(w) * 64.0 / static_cast<double>(h)));
    EXPECT_EQ(out.width, static_cast<std::size_t>(expect_w));
    for (auto p : out.pixels) ASSERT_EQ(p, v);
  }
}

TEST(Crop, ExtractsRegionAndRejectsOutOfBounds) {
  Rng rng(5);
  const auto img = random_image(10, 8, rng);
  const auto c = crop(img, {2, 3, 4, 2});
  EXPECT_EQ(c.at(0, 0), img.at(2, 3));
  EXPECT_EQ(c.at(3, 1), img.at(5, 4));
  EXPECT_THROW(crop(img, {8, 0, 3, 1}), ContractError);
}

TEST(Rotate, ZeroIsIdentity) {
  Rng rng(6);
  const auto img = random_image(20, 11, rng);
  EXPECT_EQ(rotate(img, 0.0), img);
}

// Quarter turn of a square image is an exact pixel permutation: counterclockwise on screen.
TEST(Rotate, QuarterTurnPermutesPixels) {
  Rng rng(7);
  const auto img = random_image(9, 9, rng);
  const auto out = rotate(img, 90.0);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) EXPECT_EQ(out.at(x, y), img.at(8 - y, x)) << x << "," << y;
}

// ---------------------------------------------------------------------------
// Otsu
// ---------------------------------------------------------------------------

TEST(Otsu, MatchesExhaustiveRationalSearch) {
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto hist = random_histogram(rng);
    const auto oracle = otsu_oracle(hist);
    ASSERT_EQ(otsu_threshold(hist), oracle.max_between) << "trial " << trial;
    ASSERT_EQ(oracle.min_within, oracle.max_between) << "trial " << trial;
  }
}

TEST(Otsu, RandomImagesMatchOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = random_image(1 + rng.below(40), 1 + rng.below(40), rng);
    const auto r = otsu(img);
    EXPECT_EQ(r.threshold, otsu_oracle(histogram(img)).max_between);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      EXPECT_EQ(r.binary.pixels[i], img.pixels[i] <= r.threshold ? kInk : kBackground);
  }
}

TEST(Otsu, BimodalPicksSmallestSeparatingThreshold) {
  GrayImage img(10, 2, kBackground);
  std::fill_n(img.pixels.begin(), 10, kInk);
  const auto r = otsu(img);
  EXPECT_EQ(r.threshold, 0);
  EXPECT_EQ(r.binary, img);
}

TEST(Otsu, ConstantImageGivesZeroThresholdAndUniformOutput) {
  for (int v : {0, 17, 255}) {
    const auto r = otsu(GrayImage(5, 5, static_cast<std::uint8_t>(v)));
    EXPECT_EQ(r.threshold, 0);
    const auto first = r.binary.pixels[0];
    for (auto p : r.binary.pixels) EXPECT_EQ(p, first);
  }
}

TEST(Otsu, RejectsEmptyAndOversizedHistograms) {
  EXPECT_THROW(otsu_threshold(Histogram{}), ContractError);
  Histogram h{};
  h[3] = kOtsuMaxPixels;
  EXPECT_THROW(otsu_threshold(h), ContractError);
}

// ---------------------------------------------------------------------------
// Morphology
// ---------------------------------------------------------------------------

TEST(Morphology, EmptyForegroundUnchanged) {
  const GrayImage blank(6, 4);
  EXPECT_EQ(dilate(blank, 3), blank);
  EXPECT_EQ(erode(blank, 3), blank);
}

TEST(Morphology, SinglePixelDilatesToClippedBlock) {
  GrayImage img(5, 5);
  img.at(2, 2) = kInk;
  const auto d = dilate(img);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      EXPECT_EQ(d.at(x, y) == kInk, x >= 1 && x <= 3 && y >= 1 && y <= 3);
  GrayImage corner(4, 4);
  corner.at(0, 0) = kInk;
  EXPECT_EQ(ink_count(dilate(corner)), 4u);
}

TEST(Morphology, NonBinaryInputThrows) {
  GrayImage img(3, 3);
  img.at(1, 1) = 100;
  EXPECT_THROW(dilate(img), ContractError);
  EXPECT_THROW(erode(img), ContractError);
}

TEST(Morphology, OrderingProperties) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto img = random_binary(1 + rng.below(20), 1 + rng.below(20), rng.uniform(0.05, 0.6), rng);
    const auto d1 = dilate(img), d2 = dilate(img, 2), e1 = erode(img), e2 = erode(img, 2);
    EXPECT_TRUE(subset_ink(img, d1));
    EXPECT_TRUE(subset_ink(d1, d2));
    EXPECT_TRUE(subset_ink(e1, img));
    EXPECT_TRUE(subset_ink(e2, e1));
    EXPECT_TRUE(subset_ink(img, erode(dilate(img))));  // closing is extensive
    EXPECT_TRUE(subset_ink(dilate(erode(img)), img));  // opening is anti-extensive
  }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

TEST(Augment, NeutralSpecIsIdentity) {
  Rng rng(11);
  const auto img = random_image(30, 20, rng);
  EXPECT_EQ(augment(img, {}, rng), img);
}

TEST(Augment, FullSpeckleFlipsEveryPixel) {
  Rng rng(12);
  const auto img = random_image(30, 20, rng);
  const auto out = augment(img, {1.0, Morph::none, 0.0}, rng);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    EXPECT_EQ(out.pixels[i], img.pixels[i] < 128 ? kBackground : kInk);
}

TEST(Augment, SpeckleRate) {
  Rng rng(13);
  const GrayImage img(400, 250);
  const auto out = augment(img, {0.05, Morph::none, 0.0}, rng);
  const double rate = static_cast<double>(ink_count(out)) / 100000.0;
  EXPECT_GE(rate, 0.045);
  EXPECT_LE(rate, 0.055);
}

TEST(Augment, MorphologyThickensOrThinsInk) {
  GrayImage img(9, 9);
  for (std::size_t y = 2; y < 7; ++y)
    for (std::size_t x = 3; x < 6; ++x) img.at(x, y) = kInk;
  Rng rng(14);
  EXPECT_EQ(augment(img, {0.0, Morph::dilate, 0.0}, rng), dilate(img));
  EXPECT_EQ(augment(img, {0.0, Morph::erode, 0.0}, rng), erode(img));
}

TEST(Augment, RotationKeepsSizeAndBackground) {
  Rng rng(15);
  const GrayImage blank(40, 64);
  EXPECT_EQ(augment(blank, {0.0, Morph::none, 7.5}, rng), blank);
}

TEST(Augment, InvalidSpecsRejected) {
  Rng rng(16);
  const GrayImage img(4, 4);
  EXPECT_THROW(augment(img, {1.5, Morph::none, 0.0}, rng), ConfigError);
  EXPECT_THROW(augment(img, {0.0, Morph::none, 10.5}, rng), ConfigError);
  EXPECT_THROW(AugmentSpec::parse("speckle=x"), ConfigError);
  EXPECT_THROW(AugmentSpec::parse("blur=1"), ConfigError);
  EXPECT_THROW(AugmentSpec::parse("morph=open"), ConfigError);
  EXPECT_THROW(AugmentSpec::parse("rotate=-11"), ConfigError);
}

TEST(Augment, SpecParseAndPrintRoundTrip) {
  const auto spec = AugmentSpec::parse("speckle=0.02,morph=erode,rotate=-3");
  EXPECT_EQ(spec, (AugmentSpec{0.02, Morph::erode, -3.0}));
  EXPECT_EQ(AugmentSpec::parse(spec.to_string()), spec);
  EXPECT_TRUE(AugmentSpec::parse("none").neutral());
  EXPECT_EQ(AugmentSpec{}.to_string(), "none");
  EXPECT_EQ(AugmentSpec::parse("rotate=2"), (AugmentSpec{0.0, Morph::none, 2.0}));
}

// ---------------------------------------------------------------------------
// Components and line extraction
// ---------------------------------------------------------------------------

TEST(Components, EightConnectivity) {
  GrayImage img(6, 5);
  img.at(0, 0) = img.at(1, 1) = img.at(2, 2) = kInk;  // one diagonal component
  img.at(5, 0) = kInk;                                 // isolated
  img.at(4, 4) = img.at(5, 4) = img.at(5, 3) = kInk;  // L shape
  const auto comps = connected_components(img);
  ASSERT_EQ(comps.size(), 3u);
  EXPECT_EQ(comps[0].box, (BoundingBox{0, 0, 3, 3}));
  EXPECT_EQ(comps[0].pixels, 3u);
  EXPECT_EQ(comps[1].box, (BoundingBox{5, 0, 1, 1}));
  EXPECT_EQ(comps[2].box, (BoundingBox{4, 3, 2, 2}));
}

TEST(Components, PixelCountsPartitionInk) {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const auto img = random_binary(1 + rng.below(30), 1 + rng.below(30), 0.3, rng);
    std::size_t total = 0;
    for (const auto& c : connected_components(img)) {
      total += c.pixels;
      EXPECT_LE(c.box.right(), img.width);
      EXPECT_LE(c.box.bottom(), img.height);
    }
    EXPECT_EQ(total, ink_count(img));
  }
}

TEST(GroupLines, OverlapRule) {
  // Two boxes overlapping by half of the smaller height join; a third far below stays apart.
  const std::vector<BoundingBox> boxes{{50, 10, 5, 10}, {0, 15, 5, 20}, {10, 100, 5, 10}};
  const auto lines = group_lines(boxes, 0.5);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], (BoundingBox{0, 10, 55, 25}));
  EXPECT_EQ(lines[1], (BoundingBox{10, 100, 5, 10}));
  EXPECT_EQ(group_lines(boxes, 0.6).size(), 3u);
}

TEST(ExtractLines, BlankPageGivesNothing) {
  EXPECT_TRUE(extract_lines(GrayImage(200, 100)).empty());
}

TEST(ExtractLines, SingleRenderedLineCoversAllInk) {
  const auto font = make_synthetic_font(kCharset, 3);
  const auto line = render_text_line("hello", font);
  GrayImage page(300, 150);
  paste(page, line, 40, 30);
  const auto lines = extract_lines(page);
  ASSERT_EQ(lines.size(), 1u);
  for (std::size_t y = 0; y < page.height; ++y)
    for (std::size_t x = 0; x < page.width; ++x)
      if (page.at(x, y) == kInk) {
        ASSERT_TRUE(lines[0].box.contains(x, y));
      }
  // Glyph ink spans the full area inside the margins, so the crop is the rendered line itself.
  EXPECT_EQ(lines[0].box, (BoundingBox{40, 30, line.width, line.height}));
  EXPECT_EQ(lines[0].image, line);
}

TEST(ExtractLines, PlantedThreeLinePage) {
  const auto font = make_synthetic_font(kCharset, 3);
  const std::vector<std::string> texts{"abc", "defghi", "jk"};
  const std::vector<std::pair<std::size_t, std::size_t>> at{{20, 10}, {35, 90}, {12, 170}};
  GrayImage page(260, 250);
  for (std::size_t i = 0; i < 3; ++i) paste(page, render_text_line(texts[i], font), at[i].first, at[i].second);
  const auto lines = extract_lines(page);
  ASSERT_EQ(lines.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto rendered = render_text_line(texts[i], font);
    EXPECT_EQ(lines[i].box, (BoundingBox{at[i].first, at[i].second, rendered.width, rendered.height}));
    EXPECT_EQ(lines[i].image.height, 64u);
    if (i) {
      EXPECT_LT(lines[i - 1].box.y, lines[i].box.y);
    }
  }
}

// ---------------------------------------------------------------------------
// Fonts and rendering
// ---------------------------------------------------------------------------

TEST(Render, WidthArithmeticAndDeterminism) {
  const auto font = make_synthetic_font(kCharset, 4);
  const std::u32string text = U"tea";
  std::size_t glyphs = 0;
  for (auto c : text) glyphs += font.glyph(c).width;
  const auto img = render_text_line(text, font);
  EXPECT_EQ(img.width, glyphs + font.spacing * (text.size() - 1) + 2 * font.margin_x);
  EXPECT_EQ(img.height, 64u);
  EXPECT_EQ(render_text_line(text, font), img);
}

TEST(Render, EmptyTextIsBlankMarginImage) {
  const auto font = make_synthetic_font(kCharset, 4);
  const auto img = render_text_line("", font);
  EXPECT_EQ(img, GrayImage(2 * font.margin_x, 64));
}

TEST(Render, MissingGlyphNamesCharacter) {
  const auto font = make_synthetic_font(kCharset, 4);
  try {
    render_text_line("abz", font);
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("U+007A"), std::string::npos);
  }
}

TEST(SyntheticFont, GlyphInvariants) {
  const auto font = make_synthetic_font(kCharset, 5);
  ASSERT_EQ(font.glyphs.size(), 20u);
  EXPECT_EQ(font.line_height(), 64u);
  std::vector<const Glyph*> all;
  for (const auto& [cp, g] : font.glyphs) {
    all.push_back(&g);
    auto inked = [&](std::size_t x0, std::size_t x1, std::size_t y0, std::size_t y1) {
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          if (g.ink[y * g.width + x]) return true;
      return false;
    };
    EXPECT_TRUE(inked(0, g.width, 0, 1));
    EXPECT_TRUE(inked(0, g.width, font.height - 1, font.height));
    EXPECT_TRUE(inked(0, 1, 0, font.height));
    EXPECT_TRUE(inked(g.width - 1, g.width, 0, font.height));
  }
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_NE(*all[i], *all[j]);
  EXPECT_EQ(make_synthetic_font(kCharset, 5), font);
  EXPECT_NE(make_synthetic_font(kCharset, 6), font);
}

TEST(FontFile, RoundTrip) {
  const auto font = make_synthetic_font(kCharset, 7);
  std::stringstream buf;
  font.save(buf);
  EXPECT_EQ(GlyphFont::load(buf), font);
}

TEST(FontFile, MalformedFilesThrowWithLineNumbers) {
  auto load = [](const std::string& text) {
    std::istringstream in(text);
    return GlyphFont::load(in, "f");
  };
  EXPECT_THROW(load(""), FormatError);
  EXPECT_THROW(load("font height=2 spacing=1 margin_x=0 margin_y=0 count=1\nglyph U+0061 width=2\n#.\n"), FormatError);
  EXPECT_THROW(load("font height=1 spacing=1 margin_x=0 margin_y=0 count=1\nglyph U+0061 width=2\n#x\n"), FormatError);
  EXPECT_THROW(load("font height=1 spacing=1 margin_x=0 margin_y=0 count=1\nglyph 0061 width=1\n#\n"), FormatError);
  try {
    load("font height=1 spacing=1 margin_x=0 margin_y=0 count=1\nglyph U+0061 width=2\n###\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("f:3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(GlyphFont::load("/nonexistent/font.txt"), IoError);
}
