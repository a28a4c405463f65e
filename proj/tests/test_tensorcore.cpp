#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "occlumesh/adam.hpp"
#include "occlumesh/archive.hpp"
#include "occlumesh/mlp.hpp"
#include "occlumesh/ops.hpp"
#include "test_support.hpp"

using namespace occlumesh;
using tensor::ParamMap;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;
using tensor::VarMap;
using testing::check_gradients;
using testing::random_tensor;

namespace {

nn::MlpSpec small_spec(int layers, int in, int hidden, int out, nn::Activation act) {
  nn::MlpSpec spec;
  spec.layer_count = layers;
  spec.in_dim = in;
  spec.hidden_dim = hidden;
  spec.out_dim = out;
  spec.hidden_activation = act;
  spec.output_activation = nn::Activation::kNone;
  return spec;
}

}  // namespace

TEST_CASE("eval_mlp identity layer") {
  auto spec = small_spec(1, 3, 3, 3, nn::Activation::kNone);
  ParamMap p;
  p["f.l0.w"] = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p["f.l0.b"] = Tensor({3}, 0.0);
  Tape tape;
  auto vars = tensor::bind_parameters(tape, p);
  auto y = nn::eval_mlp(spec, vars, "f", tape.constant(Tensor({1, 3}, {1, 2, 3})));
  CHECK(y.value()[0] == 1.0);
  CHECK(y.value()[1] == 2.0);
  CHECK(y.value()[2] == 3.0);
}

TEST_CASE("softplus beta 100 at zero") {
  Tape tape;
  auto y = ops::softplus(tape.constant(Tensor::scalar(0.0)), 100.0);
  CHECK(y.value().item() == doctest::Approx(std::log(2.0) / 100.0).epsilon(1e-12));
  CHECK(y.value().item() == doctest::Approx(0.006931).epsilon(1e-4));
}

TEST_CASE("two-layer MLP matches hand matrix algebra") {
  // h = relu(W1 x + b1) = relu((1, 3) + (0.5, -1)) = (1.5, 2)
  // y = W2 h + b2 = (1.5 - 2, 3 + 1) + (0, 1) = (-0.5, 5)
  auto spec = small_spec(2, 2, 2, 2, nn::Activation::kRelu);
  ParamMap p;
  p["m.l0.w"] = Tensor({2, 2}, {1, 2, 3, 4});
  p["m.l0.b"] = Tensor({2}, {0.5, -1});
  p["m.l1.w"] = Tensor({2, 2}, {1, -1, 2, 0.5});
  p["m.l1.b"] = Tensor({2}, {0, 1});
  Tape tape;
  auto vars = tensor::bind_parameters(tape, p);
  auto y = nn::eval_mlp(spec, vars, "m", tape.constant(Tensor({1, 2}, {1, 0})));
  CHECK(y.value()[0] == doctest::Approx(-0.5));
  CHECK(y.value()[1] == doctest::Approx(5.0));
}

TEST_CASE("eval_mlp shape error names the layer") {
  auto spec = small_spec(2, 2, 4, 1, nn::Activation::kRelu);
  ParamMap p;
  std::mt19937_64 rng(1);
  nn::init_mlp(spec, "m", rng, p);
  p["m.l1.w"] = Tensor({1, 3});
  Tape tape;
  auto vars = tensor::bind_parameters(tape, p);
  try {
    nn::eval_mlp(spec, vars, "m", tape.constant(Tensor({1, 2})));
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("eval_mlp is bit-deterministic") {
  auto spec = small_spec(3, 5, 16, 4, nn::Activation::kSoftplus);
  spec.skip_layers = {2};
  ParamMap p;
  std::mt19937_64 rng(3);
  nn::init_mlp(spec, "m", rng, p);
  const Tensor x = random_tensor({7, 5}, rng);
  auto run = [&] {
    Tape tape;
    auto vars = tensor::bind_parameters(tape, p);
    return nn::eval_mlp(spec, vars, "m", tape.constant(x)).value().storage();
  };
  CHECK(run() == run());
}

TEST_CASE("backward on trivial graphs") {
  {
    Tape tape;
    auto x = tape.parameter("x", Tensor::scalar(4.0));
    auto g = tape.backward(x);
    CHECK(g.at("x").item() == 1.0);
  }
  {
    Tape tape;
    auto x = tape.parameter("x", Tensor::scalar(3.0));
    auto g = tape.backward(ops::square(x));
    CHECK(g.at("x").item() == 6.0);
  }
  {
    Tape tape;
    auto x = tape.parameter("x", Tensor::scalar(3.0));
    tape.parameter("unused", Tensor({2}, 5.0));
    auto g = tape.backward(ops::mul(x, x));
    CHECK(g.at("unused")[0] == 0.0);
    CHECK(g.at("unused")[1] == 0.0);
  }
}

TEST_CASE("backward errors") {
  Tape empty;
  CHECK_THROWS_AS(empty.backward(Var()), Error);
  Tape tape;
  auto x = tape.parameter("x", Tensor::scalar(1.0));
  auto y = ops::square(x);
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), Error);
  Tape t2;
  auto v = t2.parameter("v", Tensor({2}, 1.0));
  CHECK_THROWS_AS(t2.backward(v, Tensor({3}, 1.0)), Error);
}

TEST_CASE("random 3-layer MLP gradients match central differences") {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto spec = small_spec(3, 4, 6, 2, nn::Activation::kSoftplus);
    spec.softplus_beta = 3.0;
    spec.skip_layers = {2};
    ParamMap p;
    nn::init_mlp(spec, "m", rng, p);
    for (auto& [name, t] : p)
      if (name.ends_with(".b")) t = random_tensor(t.shape(), rng, -0.3, 0.3);
    const Tensor x = random_tensor({5, 4}, rng);
    const Tensor target = random_tensor({5, 2}, rng);
    auto fn = [&](Tape& tape, const VarMap& vars) {
      auto y = nn::eval_mlp(spec, vars, "m", tape.constant(x));
      return ops::mean(ops::square(ops::sub(y, tape.constant(target))));
    };
    auto r = check_gradients(fn, p);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

// Composite of many primitive ops; run over 100 seeds.
TEST_CASE("composed graph gradients over 100 seeds") {
  double worst = 0;
  std::string where;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    ParamMap p;
    p["a"] = random_tensor({4, 3}, rng);
    p["b"] = random_tensor({3}, rng);
    p["w"] = random_tensor({2, 3}, rng);
    p["s"] = random_tensor({1}, rng, 0.5, 1.5);
    auto fn = [](Tape&, const VarMap& v) {
      auto a = v.at("a");
      auto x = ops::add_row(a, v.at("b"));
      auto y = ops::linear(ops::sigmoid(x), v.at("w"));
      auto z = ops::concat_cols({ops::exp(ops::scale(y, 0.3)), ops::softplus(x, 4.0)});
      auto n = ops::row_norm(z);
      auto d = ops::row_dot(ops::slice_cols(z, 0, 2), ops::slice_cols(z, 2, 4));
      auto q = ops::mul_scalar_var(ops::add(n, ops::square(d)), v.at("s"));
      auto r = ops::log(ops::add_scalar(ops::abs(q), 1.0));
      return ops::add(ops::sum(ops::sqrt(ops::add_scalar(r, 0.1))),
                      ops::mean(ops::softplus_slope(a, 2.0)));
    };
    auto r = check_gradients(fn, p);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = r.worst;
    }
  }
  INFO(where);
  CHECK(worst < 1e-4);
}

TEST_CASE("tangent propagation matches finite differences of the output") {
  std::mt19937_64 rng(11);
  auto spec = small_spec(4, 9, 8, 3, nn::Activation::kSoftplus);
  spec.softplus_beta = 5.0;
  spec.skip_layers = {2};
  ParamMap p;
  nn::init_mlp(spec, "f", rng, p);
  const Tensor pts = random_tensor({4, 3}, rng, -0.5, 0.5);
  const Tensor extra = random_tensor({4, 6}, rng);
  auto input_for = [&](const Tensor& v) {
    Tensor in({4, 9});
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 3; ++c) in.at(r, c) = v.at(r, c);
      for (int c = 0; c < 6; ++c) in.at(r, 3 + c) = extra.at(r, c);
    }
    return in;
  };
  // Identity tangent on the first three inputs: rows d * N + r carry e_d.
  Tensor tan({12, 3}, 0.0);
  for (int d = 0; d < 3; ++d)
    for (int r = 0; r < 4; ++r) tan.at(d * 4 + r, d) = 1.0;
  Tape tape;
  auto vars = tensor::bind_parameters(tape, p, false);
  auto out = nn::eval_mlp_with_tangent(spec, vars, "f", tape.constant(input_for(pts)),
                                       tape.constant(tan));
  const double h = 1e-6;
  for (int d = 0; d < 3; ++d) {
    Tensor up = pts, dn = pts;
    for (int r = 0; r < 4; ++r) {
      up.at(r, d) += h;
      dn.at(r, d) -= h;
    }
    Tape t2;
    auto v2 = tensor::bind_parameters(t2, p, false);
    auto yu = nn::eval_mlp(spec, v2, "f", t2.constant(input_for(up))).value();
    auto yd = nn::eval_mlp(spec, v2, "f", t2.constant(input_for(dn))).value();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) {
        const double fd = (yu.at(r, c) - yd.at(r, c)) / (2 * h);
        CHECK(testing::relative_error(out.tangent.value().at(d * 4 + r, c), fd) < 1e-5);
      }
  }
}

TEST_CASE("losses on tangents are differentiable") {
  std::mt19937_64 rng(5);
  auto spec = small_spec(3, 3, 6, 1, nn::Activation::kSoftplus);
  spec.softplus_beta = 4.0;
  ParamMap p;
  nn::init_mlp(spec, "g", rng, p);
  const Tensor pts = random_tensor({5, 3}, rng);
  Tensor tan({15, 3}, 0.0);
  for (int d = 0; d < 3; ++d)
    for (int r = 0; r < 5; ++r) tan.at(d * 5 + r, d) = 1.0;
  auto fn = [&](Tape& tape, const VarMap& vars) {
    auto out = nn::eval_mlp_with_tangent(spec, vars, "g", tape.constant(pts), tape.constant(tan));
    // Regroup [3N, 1] tangent into per-point gradient norms.
    auto g = ops::concat_cols({ops::slice_rows(out.tangent, 0, 5), ops::slice_rows(out.tangent, 5, 10),
                               ops::slice_rows(out.tangent, 10, 15)});
    return ops::mean(ops::square(ops::add_scalar(ops::row_norm(g), -1.0)));
  };
  auto r = check_gradients(fn, p);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("positional encoding values") {
  auto z = nn::positional_encode({0, 0, 0}, 6);
  REQUIRE(z.size() == 39);
  for (int i = 0; i < 3; ++i) CHECK(z[i] == 0.0);
  for (int k = 0; k < 6; ++k)
    for (int d = 0; d < 3; ++d) {
      CHECK(z[3 + 6 * k + d] == 0.0);
      CHECK(z[3 + 6 * k + 3 + d] == 1.0);
    }
  auto e = nn::positional_encode({1, 0, 0}, 1);
  const double expected[9] = {1, 0, 0, 0, 0, 0, -1, 1, 1};
  for (int i = 0; i < 9; ++i) CHECK(e[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  CHECK(nn::positional_encode({0.6, 0, 0.8}, 4).size() == 27);
  CHECK(nn::encoded_width(4) == 27);
}

TEST_CASE("positional encoding frequency block norm bound and tape agreement") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor v = random_tensor({1, 3}, rng, -3, 3);
    const auto e = nn::positional_encode({v[0], v[1], v[2]}, 6);
    double sq = 0;
    for (std::size_t i = 3; i < e.size(); ++i) sq += e[i] * e[i];
    CHECK(std::sqrt(sq) <= std::sqrt(36.0) + 1e-12);
    Tape tape;
    auto y = ops::positional_encode(tape.constant(v), 6);
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(y.value()[i] == e[i]);
  }
  ParamMap p;
  p["v"] = random_tensor({3, 3}, rng);
  auto fn = [](Tape&, const VarMap& vars) {
    return ops::sum(ops::square(ops::positional_encode(vars.at("v"), 3)));
  };
  CHECK(check_gradients(fn, p).max_rel_error < 1e-4);
}

TEST_CASE("positional encoding jacobian matches differences") {
  std::mt19937_64 rng(4);
  const Tensor v = random_tensor({2, 3}, rng);
  const Tensor jac = nn::positional_encode_jacobian(v, 3);
  const double h = 1e-6;
  for (int d = 0; d < 3; ++d)
    for (int r = 0; r < 2; ++r) {
      auto up = v, dn = v;
      up.at(r, d) += h;
      dn.at(r, d) -= h;
      auto eu = nn::positional_encode({up.at(r, 0), up.at(r, 1), up.at(r, 2)}, 3);
      auto ed = nn::positional_encode({dn.at(r, 0), dn.at(r, 1), dn.at(r, 2)}, 3);
      for (std::size_t c = 0; c < eu.size(); ++c)
        CHECK(jac.at(d * 2 + r, c) == doctest::Approx((eu[c] - ed[c]) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("adam step") {
  SUBCASE("zero gradients leave parameters unchanged") {
    ParamMap p{{"x", Tensor({2}, {1.5, -2.0})}};
    nn::AdamState s;
    nn::adam_step(p, {{"x", Tensor({2}, 0.0)}}, s, 0.1);
    CHECK(p.at("x")[0] == 1.5);
    CHECK(p.at("x")[1] == -2.0);
    CHECK(s.step == 1);
  }
  SUBCASE("first bias-corrected step moves by lr") {
    // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) = 0.1 / (1 + 1e-8)
    ParamMap p{{"x", Tensor::scalar(0.0)}};
    nn::AdamState s;
    nn::adam_step(p, {{"x", Tensor::scalar(1.0)}}, s, 0.1);
    CHECK(p.at("x").item() == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("descent on a convex quadratic") {
    ParamMap p{{"x", Tensor::scalar(2.0)}};
    nn::AdamState s;
    double prev = 4.0;
    for (int i = 0; i < 2; ++i) {
      nn::adam_step(p, {{"x", Tensor::scalar(2 * p.at("x").item())}}, s, 0.1);
      const double f = p.at("x").item() * p.at("x").item();
      CHECK(f < prev);
      prev = f;
    }
  }
  SUBCASE("NaN gradient fails loudly") {
    ParamMap p{{"x", Tensor::scalar(0.0)}};
    nn::AdamState s;
    CHECK_THROWS_AS(nn::adam_step(p, {{"x", Tensor::scalar(std::nan(""))}}, s, 0.1), Error);
    CHECK_THROWS_AS(nn::adam_step(p, {{"x", Tensor::scalar(1.0)}}, s, 0.0), Error);
  }
}

TEST_CASE("op gradients: image and rendering primitives") {
  std::mt19937_64 rng(21);
  SUBCASE("conv2d stride 2 with padding") {
    ParamMap p;
    p["x"] = random_tensor({2, 6, 5}, rng);
    p["w"] = random_tensor({3, 2, 3, 3}, rng);
    p["b"] = random_tensor({3}, rng);
    auto fn = [](Tape&, const VarMap& v) {
      auto y = ops::conv2d(v.at("x"), v.at("w"), v.at("b"), 2, 1);
      return ops::sum(ops::square(y));
    };
    auto r = check_gradients(fn, p);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("pooling, upsampling and channel ops") {
    ParamMap p;
    p["x"] = random_tensor({2, 4, 4}, rng);
    p["g"] = random_tensor({2}, rng);
    auto fn = [](Tape&, const VarMap& v) {
      auto x = v.at("x");
      auto pooled = ops::avg_pool2x(x);
      auto up = ops::upsample_nearest2x(pooled);
      auto cat = ops::concat_channels({ops::mul(up, x), x});
      auto gp = ops::global_avg_pool(cat);
      auto shifted = ops::add_channel_vector(x, v.at("g"));
      return ops::add(ops::sum(ops::square(gp)), ops::sum(ops::sigmoid(shifted)));
    };
    CHECK(check_gradients(fn, p).max_rel_error < 1e-4);
  }
  SUBCASE("bilinear gather") {
    ParamMap p;
    p["m"] = random_tensor({3, 5, 6}, rng);
    std::vector<std::array<double, 2>> coords{{0.3, 1.7}, {4.9, 3.2}, {-2, 1}, {7.5, 9}, {2, 2}};
    auto fn = [&](Tape&, const VarMap& v) {
      return ops::sum(ops::square(ops::bilinear_gather(v.at("m"), coords)));
    };
    CHECK(check_gradients(fn, p).max_rel_error < 1e-4);
  }
  SUBCASE("neus weights and compositing") {
    ParamMap p;
    p["s"] = random_tensor({3, 7}, rng, -0.5, 0.5);
    p["h"] = Tensor::scalar(4.0);
    p["c"] = random_tensor({21, 2}, rng);
    auto fn = [](Tape&, const VarMap& v) {
      auto w = ops::neus_weights(v.at("s"), v.at("h"));
      auto c = ops::composite(w, v.at("c"));
      return ops::add(ops::sum(ops::square(c)), ops::sum(ops::row_sum(w)));
    };
    auto r = check_gradients(fn, p);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("neighbour mean and tiled multiply") {
    ParamMap p;
    p["x"] = random_tensor({4, 3}, rng);
    p["t"] = random_tensor({8, 3}, rng);
    std::vector<std::vector<int>> nb{{0, 1}, {1, 2, 3}, {3}, {0, 2}};
    auto fn = [&](Tape&, const VarMap& v) {
      auto m = ops::neighbor_mean(v.at("x"), nb);
      auto t = ops::mul_tiled(v.at("t"), v.at("x"));
      return ops::add(ops::sum(ops::square(ops::sub(v.at("x"), m))), ops::sum(ops::square(t)));
    };
    CHECK(check_gradients(fn, p).max_rel_error < 1e-4);
  }
}

TEST_CASE("archive round trip is byte stable") {
  io::TensorArchive a;
  a.header = {{"schema", 1}, {"note", "x"}};
  a.entries["w"] = Tensor({2, 3}, {1, 2, 3, 4, 5, -6.25});
  a.entries["b"] = Tensor({1}, {std::numbers::pi});
  const auto bytes = io::encode_archive(a);
  const auto back = io::decode_archive(bytes);
  CHECK(back.header == a.header);
  CHECK(back.entries.at("w").shape() == a.entries.at("w").shape());
  CHECK(back.entries.at("w").storage() == a.entries.at("w").storage());
  CHECK(back.entries.at("b")[0] == std::numbers::pi);
  CHECK(io::encode_archive(back) == bytes);
  auto broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS_AS(io::decode_archive(broken), Error);

  const auto path = std::filesystem::temp_directory_path() / "occlumesh_archive_test.ckpt";
  io::write_archive(path, a);
  CHECK(io::encode_archive(io::read_archive(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("fnv1a reference values") {
  CHECK(io::fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(io::fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(io::hex64(0xabcULL) == "0000000000000abc");
}
