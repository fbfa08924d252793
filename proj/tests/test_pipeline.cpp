#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "errors.hpp"
#include "image.hpp"
#include "pipeline.hpp"
#include "rng.hpp"

using namespace pbflow;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("/tmp/pbflow_pipeline_") + name;
}

// Smooth sinusoid mixture plus per-pixel noise: locally unique texture with
// enough structure for patch matching to learn from.
Tensor textured_image(int w, int h, Rng& rng, int waves = 6) {
  std::vector<double> fx(waves), fy(waves), ph(waves), amp(waves);
  for (int k = 0; k < waves; ++k) {
    fx[k] = rng.uniform(0.15, 0.9);
    fy[k] = rng.uniform(0.15, 0.9);
    ph[k] = rng.uniform(0.0, 6.28318);
    amp[k] = rng.uniform(0.5, 1.5);
  }
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0.0;
      for (int k = 0; k < waves; ++k) v += amp[k] * std::sin(fx[k] * x + fy[k] * y + ph[k]);
      img.data()[static_cast<std::size_t>(y) * w + x] =
          128.0 + 24.0 * v + rng.uniform(-12.0, 12.0);
    }
  return img;
}

// Horizontal cyclic roll: out(x, y) = in((x - dx) mod w, y).
Tensor roll_x(const Tensor& in, int dx) {
  const int h = static_cast<int>(in.dim(0)), w = static_cast<int>(in.dim(1));
  Tensor out(in.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.data()[static_cast<std::size_t>(y) * w + x] =
          in.data()[static_cast<std::size_t>(y) * w + ((x - dx) % w + w) % w];
  return out;
}

}  // namespace

TEST_CASE("pgm: roundtrip, wide samples, header quirks") {
  SUBCASE("8-bit roundtrip is exact") {
    Rng rng(4);
    Tensor img({7, 11});
    for (double& v : img.values()) v = std::floor(rng.uniform(0.0, 256.0));
    const std::string path = temp_path("rt.pgm");
    write_pgm(img, path);
    Tensor back = read_pgm(path);
    REQUIRE(back.shape() == img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
    std::remove(path.c_str());
  }

  SUBCASE("writer clamps and rounds") {
    Tensor img({1, 4});
    img.data()[0] = -5.0;
    img.data()[1] = 300.0;
    img.data()[2] = 17.6;
    img.data()[3] = std::nan("");
    const std::string path = temp_path("clamp.pgm");
    write_pgm(img, path);
    Tensor back = read_pgm(path);
    CHECK(back[0] == 0.0);
    CHECK(back[1] == 255.0);
    CHECK(back[2] == 18.0);
    CHECK(back[3] == 0.0);
    std::remove(path.c_str());
  }

  SUBCASE("16-bit samples read big-endian") {
    const std::string path = temp_path("wide.pgm");
    {
      std::ofstream out(path, std::ios::binary);
      out << "P5\n2 1\n65535\n";
      const unsigned char bytes[4] = {0x01, 0x02, 0xFF, 0xFE};
      out.write(reinterpret_cast<const char*>(bytes), 4);
    }
    Tensor img = read_pgm(path);
    CHECK(img[0] == 258.0);
    CHECK(img[1] == 65534.0);
    std::remove(path.c_str());
  }

  SUBCASE("comments in the header are skipped") {
    const std::string path = temp_path("comment.pgm");
    {
      std::ofstream out(path, std::ios::binary);
      out << "P5\n# a comment\n3 # inline\n1\n255\n";
      const unsigned char bytes[3] = {9, 8, 7};
      out.write(reinterpret_cast<const char*>(bytes), 3);
    }
    Tensor img = read_pgm(path);
    REQUIRE(img.dim(1) == 3);
    CHECK(img[0] == 9.0);
    CHECK(img[2] == 7.0);
    std::remove(path.c_str());
  }

  SUBCASE("corruption is rejected") {
    const std::string path = temp_path("bad.pgm");
    auto write_bytes = [&](const std::string& content) {
      std::ofstream out(path, std::ios::binary);
      out << content;
    };
    write_bytes("P2\n2 2\n255\n....");
    CHECK_THROWS_AS(read_pgm(path), IoError);
    write_bytes("P5\n2 2\n255\nab");  // truncated
    CHECK_THROWS_AS(read_pgm(path), IoError);
    write_bytes("P5\n2 2\n255\nabcde");  // trailing byte
    CHECK_THROWS_AS(read_pgm(path), IoError);
    write_bytes("P5\n0 2\n255\n");  // zero width
    CHECK_THROWS_AS(read_pgm(path), IoError);
    write_bytes("P5\n2 2\n70000\n");  // maxval out of range
    CHECK_THROWS_AS(read_pgm(path), IoError);
    write_bytes("P5\n2 1\n100\n");  // sample above maxval
    {
      std::ofstream out(path, std::ios::binary | std::ios::app);
      const unsigned char bytes[2] = {50, 200};
      out.write(reinterpret_cast<const char*>(bytes), 2);
    }
    CHECK_THROWS_AS(read_pgm(path), IoError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_pgm(path), IoError);  // missing file

    CHECK_THROWS_AS(write_pgm(Tensor({2, 2, 2}), temp_path("r3.pgm")),
                    DimensionError);
  }
}

TEST_CASE("normalize image: standardization contract") {
  Rng rng(11);
  Tensor img({9, 13});
  for (double& v : img.values()) v = rng.uniform(0.0, 255.0);

  Tensor norm = normalize_image(img);
  double mean = 0.0;
  for (double v : norm.values()) mean += v;
  mean /= static_cast<double>(norm.size());
  double var = 0.0;
  for (double v : norm.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(norm.size());
  CHECK(std::abs(mean) < 1e-10);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-10);

  SUBCASE("constant image maps to zeros") {
    Tensor flat = normalize_image(Tensor::full({4, 4}, 77.0));
    for (double v : flat.values()) CHECK(v == 0.0);
  }

  SUBCASE("idempotent to 1e-12") {
    Tensor twice = normalize_image(norm);
    for (std::size_t i = 0; i < norm.size(); ++i)
      CHECK(std::abs(twice[i] - norm[i]) <= 1e-12);
  }

  CHECK_THROWS_AS(normalize_image(Tensor({2, 2, 2})), DimensionError);
}

TEST_CASE("encode field: shape, equivariance, per-patch oracle") {
  Rng rng(21);
  EncoderModel model = make_patch_encoder(9, 4, 6, 12);
  Rng init = rng.substream("init");
  model.init_params(init);

  const int w = 20, h = 16, patch = 9;
  Tensor img = textured_image(w, h, rng);

  DescriptorField field = encode_field(model, img, patch);
  CHECK(field.width == w - patch + 1);
  CHECK(field.height == h - patch + 1);
  CHECK(field.dim == descriptor_dim(model, patch));

  SUBCASE("identical images give identical fields") {
    DescriptorField again = encode_field(model, img, patch);
    const auto a = field.data.values();
    const auto b = again.data.values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }

  SUBCASE("translation: shifted crop gives shifted field") {
    const int dx = 4;
    Tensor wide = textured_image(w + dx, h, rng);
    Tensor crop_a({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    Tensor crop_b(crop_a.shape());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        crop_a.data()[static_cast<std::size_t>(y) * w + x] =
            wide.data()[static_cast<std::size_t>(y) * (w + dx) + x];
        crop_b.data()[static_cast<std::size_t>(y) * w + x] =
            wide.data()[static_cast<std::size_t>(y) * (w + dx) + x + dx];
      }
    DescriptorField fa = encode_field(model, crop_a, patch);
    DescriptorField fb = encode_field(model, crop_b, patch);
    // crop_b pixel (x, y) shows the same patch as crop_a pixel (x + dx, y).
    for (int y = 0; y < fb.height; ++y)
      for (int x = 0; x + dx < fa.width; ++x) {
        const double* da = fa.at(x + dx, y);
        const double* db = fb.at(x, y);
        for (std::size_t d = 0; d < fa.dim; ++d)
          CHECK(da[d] == doctest::Approx(db[d]).epsilon(1e-12));
      }
  }

  SUBCASE("matches a one-patch-at-a-time forward") {
    model.set_mode(Mode::Eval);
    const int lo = (patch - 1) / 2;
    for (int y = 0; y < field.height; y += 3)
      for (int x = 0; x < field.width; x += 3) {
        Tensor single({1, 1, 9, 9});
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            single.data()[static_cast<std::size_t>(py) * patch + px] =
                img.at(static_cast<std::size_t>(y + py),
                       static_cast<std::size_t>(x + px));
        (void)lo;
        Tensor desc = model.forward(single);
        const double* got = field.at(x, y);
        REQUIRE(desc.size() == field.dim);
        for (std::size_t d = 0; d < field.dim; ++d)
          CHECK(got[d] == doctest::Approx(desc[d]).epsilon(1e-12));
      }
  }

  SUBCASE("dense-stack encoders take flattened patches") {
    EncoderModel dense;
    dense.add(std::make_unique<Dense>(25, 8));
    dense.add(std::make_unique<LeakyReLU>(0.1));
    Rng dense_init(3);
    dense.init_params(dense_init);
    DescriptorField f = encode_field(dense, img, 5);
    CHECK(f.width == w - 4);
    CHECK(f.height == h - 4);
    CHECK(f.dim == 8);
  }

  CHECK_THROWS_AS(encode_field(model, textured_image(8, 8, rng), 9),
                  DimensionError);
  CHECK_THROWS_AS(encode_field(model, Tensor({2, 2, 2}), 9), DimensionError);
  CHECK_THROWS_AS(encode_field(model, img, 0), DomainError);
}

TEST_CASE("flow metrics: exact cases, oracle, masking, monotonicity") {
  const int w = 6, h = 5;
  FlowField gt(w, h, true);
  Rng rng(31);
  for (std::size_t i = 0; i < gt.u.size(); ++i) {
    gt.u[i] = static_cast<int>(rng.uniform_int(-4, 4));
    gt.v[i] = static_cast<int>(rng.uniform_int(-4, 4));
  }

  SUBCASE("perfect prediction") {
    DenseFlow pred(w, h);
    for (std::size_t i = 0; i < pred.u.size(); ++i) {
      pred.u[i] = gt.u[i];
      pred.v[i] = gt.v[i];
    }
    FlowMetrics m = flow_metrics(pred, gt, 3.0, 10.0);
    CHECK(m.epe == 0.0);
    CHECK(m.bad_rate == 0.0);
    CHECK(m.accuracy == 1.0);
    CHECK(m.evaluated == static_cast<std::size_t>(w) * h);
  }

  SUBCASE("uniform offset just over the bad threshold") {
    DenseFlow pred(w, h);
    for (std::size_t i = 0; i < pred.u.size(); ++i) {
      pred.u[i] = gt.u[i] + 3.01;
      pred.v[i] = gt.v[i];
    }
    FlowMetrics m = flow_metrics(pred, gt, 3.0, 10.0);
    CHECK(m.bad_rate == 1.0);
    CHECK(m.epe == doctest::Approx(3.01).epsilon(1e-12));
    CHECK(m.accuracy == 1.0);  // still inside the 10px accuracy radius
  }

  SUBCASE("random prediction against a direct per-pixel oracle") {
    DenseFlow pred(w, h);
    FlowField mask = gt;
    for (std::size_t i = 0; i < pred.u.size(); ++i) {
      pred.u[i] = rng.uniform(-6.0, 6.0);
      pred.v[i] = rng.uniform(-6.0, 6.0);
      mask.valid[i] = rng.uniform_int(0, 3) > 0 ? 1 : 0;
    }
    mask.valid[0] = 1;  // keep at least one pixel scored
    FlowMetrics m = flow_metrics(pred, mask, 3.0, 10.0);

    double err_sum = 0.0;
    std::size_t n = 0, bad = 0, good = 0;
    for (std::size_t i = 0; i < mask.valid.size(); ++i) {
      if (!mask.valid[i]) continue;
      const double du = pred.u[i] - mask.u[i], dv = pred.v[i] - mask.v[i];
      const double err = std::sqrt(du * du + dv * dv);
      err_sum += err;
      ++n;
      if (err > 3.0) ++bad;
      if (err < 10.0) ++good;
    }
    CHECK(m.evaluated == n);
    CHECK(m.epe == doctest::Approx(err_sum / static_cast<double>(n)).epsilon(1e-12));
    CHECK(m.bad_rate ==
          doctest::Approx(static_cast<double>(bad) / static_cast<double>(n)));
    CHECK(m.accuracy ==
          doctest::Approx(static_cast<double>(good) / static_cast<double>(n)));

    // Monotone in the thresholds.
    CHECK(flow_metrics(pred, mask, 2.0, 10.0).bad_rate >= m.bad_rate);
    CHECK(flow_metrics(pred, mask, 4.0, 10.0).bad_rate <= m.bad_rate);
    CHECK(flow_metrics(pred, mask, 3.0, 5.0).accuracy <= m.accuracy);
    CHECK(flow_metrics(pred, mask, 3.0, 15.0).accuracy >= m.accuracy);
  }

  SUBCASE("invalid ground truth is ignored") {
    DenseFlow pred(w, h);
    FlowField mask = gt;
    for (std::size_t i = 0; i < pred.u.size(); ++i) {
      pred.u[i] = gt.u[i];
      pred.v[i] = gt.v[i];
    }
    pred.u[3] += 1000.0;  // huge error at a pixel we then mask out
    mask.valid[3] = 0;
    FlowMetrics m = flow_metrics(pred, mask, 3.0, 10.0);
    CHECK(m.epe == 0.0);
    CHECK(m.evaluated == static_cast<std::size_t>(w) * h - 1);
  }

  SUBCASE("sparse variant scores only doubly-valid pixels") {
    FlowField pred(w, h);
    pred.valid[pred.idx(2, 2)] = 1;
    pred.u[pred.idx(2, 2)] = gt.u[pred.idx(2, 2)];
    pred.v[pred.idx(2, 2)] = gt.v[pred.idx(2, 2)];
    FlowMetrics m = flow_metrics_sparse(pred, gt, 3.0, 10.0);
    CHECK(m.evaluated == 1);
    CHECK(m.epe == 0.0);

    FlowField none(w, h);
    CHECK_THROWS_AS(flow_metrics_sparse(none, gt, 3.0, 10.0), DomainError);
  }

  SUBCASE("errors") {
    DenseFlow pred(w, h);
    FlowField empty_gt(w, h);
    CHECK_THROWS_AS(flow_metrics(pred, empty_gt, 3.0, 10.0), DomainError);
    DenseFlow wrong(w + 1, h);
    CHECK_THROWS_AS(flow_metrics(wrong, gt, 3.0, 10.0), DimensionError);
  }
}

TEST_CASE("pipeline config validation") {
  PipelineConfig cfg;
  cfg.validate();
  PipelineConfig bad = cfg;
  bad.downsample = 3;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = cfg;
  bad.knn = 0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = cfg;
  bad.kappa = -1.0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = cfg;
  bad.bad_threshold = 0.0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = cfg;
  bad.match.iterations = 0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("run flow: self pair gives near-zero flow") {
  Rng rng(41);
  Tensor img = textured_image(40, 40, rng);
  EncoderModel model = make_patch_encoder(9, 4, 6, 12);
  Rng init = rng.substream("init");
  model.init_params(init);

  PipelineConfig cfg;
  cfg.match.iterations = 2;
  cfg.match.search_radius = 16;
  cfg.match.cc_area_threshold = 25;
  cfg.match.border_margin = 6;
  cfg.match.seed = 77;

  FlowField gt(40, 40, true);  // zero flow everywhere
  FlowResult res = run_flow(model, img, img, cfg, &gt);

  REQUIRE(res.has_dense_metrics);
  CHECK(res.dense_metrics.epe < 0.5);
  CHECK(res.dense_metrics.bad_rate == 0.0);
  CHECK(res.after_downsample > 0);
  CHECK(res.matched >= res.after_bidirectional);
  CHECK(res.after_bidirectional >= res.after_components);
  CHECK(res.after_components >= res.after_border);
  CHECK(res.after_border >= res.after_downsample);

  SUBCASE("deterministic rerun") {
    FlowResult again = run_flow(model, img, img, cfg, &gt);
    REQUIRE(again.dense.u.size() == res.dense.u.size());
    for (std::size_t i = 0; i < res.dense.u.size(); ++i) {
      CHECK(again.dense.u[i] == res.dense.u[i]);
      CHECK(again.dense.v[i] == res.dense.v[i]);
    }
    CHECK(again.sparse.valid == res.sparse.valid);
    CHECK(again.sparse.u == res.sparse.u);
    CHECK(again.sparse.v == res.sparse.v);
  }

  SUBCASE("seeds survive value-preserving: all zero offsets") {
    for (std::size_t i = 0; i < res.sparse.valid.size(); ++i)
      if (res.sparse.valid[i]) {
        CHECK(res.sparse.u[i] == 0);
        CHECK(res.sparse.v[i] == 0);
      }
  }
}

TEST_CASE("run flow: stage failure carries the stage name") {
  Rng rng(43);
  Tensor img = textured_image(24, 24, rng);
  EncoderModel model = make_patch_encoder(9, 4, 6, 12);
  Rng init = rng.substream("init");
  model.init_params(init);

  PipelineConfig cfg;
  cfg.match.search_radius = 8;
  cfg.match.cc_area_threshold = 4;
  cfg.match.border_margin = 12;  // clears the whole 16x16 interior
  cfg.match.seed = 5;

  try {
    run_flow(model, img, img, cfg);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.stage() == "border_filter");
    CHECK(std::string(e.what()).find("matched=") != std::string::npos);
  }

  Tensor small = textured_image(20, 24, rng);
  CHECK_THROWS_AS(run_flow(model, img, small, cfg), DimensionError);
}

TEST_CASE("train patch encoder: loss trend, lambda equivalence, callback") {
  Rng rng(47);
  Tensor img_a = textured_image(48, 48, rng);
  Tensor img_b = roll_x(img_a, 5);
  FlowField gt(48, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x + 5 < 48; ++x) {
      const std::size_t i = gt.idx(x, y);
      gt.valid[i] = 1;
      gt.u[i] = 5;
    }

  PatchTrainOptions opt;
  opt.variant = LossVariant::SpringSd;
  opt.margin = 10.0;
  opt.epochs = 10;
  opt.batch = 32;
  opt.pair_count = 256;
  opt.seed = 13;

  EncoderModel model = make_patch_encoder(9, 4, 6, 12);
  std::vector<std::pair<int, double>> seen;
  opt.on_epoch = [&](int e, double l) { seen.emplace_back(e, l); };
  TrainResult tr = train_patch_encoder(model, img_a, img_b, gt, opt);
  REQUIRE(tr.ok);
  REQUIRE(tr.epoch_losses.size() == 10);
  CHECK(tr.epoch_losses[9] < tr.epoch_losses[0]);
  REQUIRE(seen.size() == 10);
  for (int e = 0; e < 10; ++e) {
    CHECK(seen[static_cast<std::size_t>(e)].first == e);
    CHECK(seen[static_cast<std::size_t>(e)].second ==
          tr.epoch_losses[static_cast<std::size_t>(e)]);
  }

  SUBCASE("lambda 1 spring_sd reproduces spring exactly") {
    PatchTrainOptions sd = opt;
    sd.variant = LossVariant::SpringSd;
    sd.lambda = 1.0;
    sd.epochs = 4;
    sd.on_epoch = nullptr;
    PatchTrainOptions plain = sd;
    plain.variant = LossVariant::Spring;

    EncoderModel m1 = make_patch_encoder(9, 4, 6, 12);
    EncoderModel m2 = make_patch_encoder(9, 4, 6, 12);
    TrainResult r1 = train_patch_encoder(m1, img_a, img_b, gt, sd);
    TrainResult r2 = train_patch_encoder(m2, img_a, img_b, gt, plain);
    REQUIRE(r1.ok);
    REQUIRE(r2.ok);
    REQUIRE(r1.epoch_losses.size() == r2.epoch_losses.size());
    for (std::size_t e = 0; e < r1.epoch_losses.size(); ++e)
      CHECK(r1.epoch_losses[e] == r2.epoch_losses[e]);
  }

  SUBCASE("checkpoint roundtrip preserves eval outputs") {
    const std::string path = temp_path("enc.ckpt");
    save_model(model, path);
    EncoderModel back = load_model(path);
    std::remove(path.c_str());

    model.set_mode(Mode::Eval);
    back.set_mode(Mode::Eval);
    Tensor probe({2, 1, 9, 9});
    Rng prng(3);
    for (double& v : probe.values()) v = prng.uniform(-1.0, 1.0);
    Tensor out_a = model.forward(probe);
    Tensor out_b = back.forward(probe);
    REQUIRE(out_a.size() == out_b.size());
    for (std::size_t i = 0; i < out_a.size(); ++i) CHECK(out_a[i] == out_b[i]);
  }

  CHECK_THROWS_AS(
      [&] {
        PatchTrainOptions bad = opt;
        bad.pair_count = 3;
        EncoderModel m = make_patch_encoder(9, 4, 6, 12);
        train_patch_encoder(m, img_a, img_b, gt, bad);
      }(),
      DomainError);
}

TEST_CASE("run flow: trained encoder recovers a known shift") {
  Rng rng(53);
  Tensor img_a = textured_image(64, 64, rng);
  Tensor img_b = roll_x(img_a, 5);

  FlowField gt(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x + 5 < 64; ++x) {
      const std::size_t i = gt.idx(x, y);
      gt.valid[i] = 1;
      gt.u[i] = 5;
    }

  PatchTrainOptions topt;
  topt.variant = LossVariant::SpringSd;
  topt.margin = 10.0;
  topt.epochs = 8;
  topt.batch = 32;
  topt.pair_count = 256;
  topt.seed = 29;
  EncoderModel model = make_patch_encoder(9, 4, 6, 12);
  TrainResult tr = train_patch_encoder(model, img_a, img_b, gt, topt);
  REQUIRE(tr.ok);

  PipelineConfig cfg;
  cfg.match.iterations = 2;
  cfg.match.search_radius = 16;
  cfg.match.cc_area_threshold = 50;
  cfg.match.border_margin = 8;
  cfg.match.seed = 99;

  // Interior evaluation: skip the border ring where the roll wraps and
  // matching support is missing.
  FlowField interior_gt(64, 64);
  for (int y = 12; y < 52; ++y)
    for (int x = 12; x < 52; ++x) {
      const std::size_t i = interior_gt.idx(x, y);
      interior_gt.valid[i] = 1;
      interior_gt.u[i] = 5;
    }

  FlowResult res = run_flow(model, img_a, img_b, cfg, &interior_gt);
  REQUIRE(res.has_dense_metrics);
  CHECK(res.dense_metrics.epe < 1.0);
  CHECK(res.dense_metrics.bad_rate < 0.05);
  REQUIRE(res.has_sparse_metrics);
  CHECK(res.sparse_metrics.epe < 1.0);
}
