#include <doctest.h>

#include "medpeft/mednext.hpp"
#include "support.hpp"

using namespace medpeft;
using testutil::random_tensor;

namespace {

// Layer-by-layer count written independently of the library's BlockSpec arithmetic.
int64_t oracle_count(int64_t in, int64_t classes, int64_t base, int levels, int blocks, int64_t r = 2, int64_t k = 3) {
  const int64_t k3 = k * k * k;
  auto dw = [&](int64_t c) { return c * k3 + c; };
  auto pw = [](int64_t a, int64_t b) { return a * b + b; };
  auto gn = [](int64_t c) { return 2 * c; };
  auto basic = [&](int64_t c) { return dw(c) + gn(c) + pw(c, r * c) + pw(r * c, c); };
  auto down = [&](int64_t c) { return dw(c) + gn(c) + pw(c, r * c) + pw(r * c, 2 * c) + pw(c, 2 * c); };
  auto up = [&](int64_t c) { return dw(c) + gn(c) + pw(c, r * c) + pw(r * c, c / 2) + pw(c, c / 2); };
  int64_t n = pw(in, base) + pw(base, classes);
  for (int l = 0; l < levels; ++l) {
    const int64_t c = base << l;
    for (int i = 0; i < blocks; ++i) n += basic(c);
    if (l + 1 < levels) {
      for (int i = 0; i < blocks; ++i) n += basic(c);
      n += down(c) + up(2 * c);
    }
  }
  return n;
}

ModelConfig spec_tiny() {
  ModelConfig c;
  c.in_channels = 2;
  c.n_classes = 3;
  c.base_channels = 4;
  c.n_levels = 3;
  return c;
}

}  // namespace

TEST_CASE("block output shapes") {
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({8, 16, 16, 16}, 2);
  MedNeXtBlock<float> basic({8, 8, BlockKind::Basic, 2, 3, 0}, rng);
  MedNeXtBlock<float> down({8, 16, BlockKind::Down, 2, 3, 0}, rng);
  MedNeXtBlock<float> up({8, 4, BlockKind::Up, 2, 3, 0}, rng);
  CHECK(basic.forward(x, false).shape() == std::vector<int64_t>{8, 16, 16, 16});
  CHECK(down.forward(x, false).shape() == std::vector<int64_t>{16, 8, 8, 8});
  CHECK(up.forward(x, false).shape() == std::vector<int64_t>{4, 32, 32, 32});
  auto odd = random_tensor<float>({8, 5, 7, 3}, 3);
  CHECK(down.forward(odd, false).shape() == std::vector<int64_t>{16, 3, 4, 2});
  CHECK_THROWS_AS(basic.forward(random_tensor<float>({4, 8, 8, 8}, 4), false), Error);
}

TEST_CASE("block spec invariants") {
  CHECK_THROWS_AS(BlockSpec({8, 16, BlockKind::Basic, 2, 3, 0}).validate(), Error);
  CHECK_THROWS_AS(BlockSpec({8, 8, BlockKind::Down, 2, 3, 0}).validate(), Error);
  CHECK_THROWS_AS(BlockSpec({8, 16, BlockKind::Up, 2, 3, 0}).validate(), Error);
  ModelConfig c;
  c.kernel_size = 4;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("zeroed expansion and compression leave the residual path") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({8, 6, 6, 6}, 6);
  MedNeXtBlock<float> basic({8, 8, BlockKind::Basic, 2, 3, 0}, rng);
  basic.zero_inner();
  CHECK(basic.forward(x, false) == x);

  MedNeXtBlock<float> down({8, 16, BlockKind::Down, 2, 3, 0}, rng);
  down.zero_inner();
  nn::ParameterList<float> ps;
  down.collect("b.", "a.", ps);
  nn::Parameter<float>* rw = nullptr;
  nn::Parameter<float>* rb = nullptr;
  for (auto& p : ps) {
    if (p.name == "b.res.weight") rw = p.param;
    if (p.name == "b.res.bias") rb = p.param;
  }
  REQUIRE(rw);
  REQUIRE(rb);
  // Oracle: stride-2 1x1x1 conv evaluated directly.
  auto y = down.forward(x, false);
  double worst = 0.0;
  for (int o = 0; o < 16; ++o)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          double s = (*rb).value[o];
          for (int c = 0; c < 8; ++c) s += (*rw).value[o * 8 + c] * x.at(c, 2 * i, 2 * j, 2 * k);
          worst = std::max(worst, std::fabs(s - y.at(o, i, j, k)));
        }
  CHECK(worst < 1e-5);
}

TEST_CASE("backbone forward shapes") {
  MedNeXt<float> tiny(spec_tiny());
  CHECK(tiny.forward(random_tensor<float>({2, 16, 16, 16}, 7), false).shape() == std::vector<int64_t>{3, 16, 16, 16});

  MedNeXt<float> s(ModelConfig::mednext_s());
  CHECK(s.forward(random_tensor<float>({4, 16, 16, 16}, 8), false).shape() == std::vector<int64_t>{4, 16, 16, 16});
  CHECK_THROWS_AS(s.forward(random_tensor<float>({4, 24, 16, 16}, 8), false), Error);
  CHECK_THROWS_AS(s.forward(random_tensor<float>({3, 16, 16, 16}, 8), false), Error);

  ModelConfig one = spec_tiny();
  one.n_levels = 1;
  MedNeXt<float> flat(one);
  CHECK(flat.forward(random_tensor<float>({2, 5, 6, 7}, 9), false).shape() == std::vector<int64_t>{3, 5, 6, 7});
}

TEST_CASE("parameter counting") {
  nn::PointwiseConv3d<float> pw(4, 32);
  nn::DepthwiseConv3d<float> dw(32, 3, 1);
  CHECK(pw.weight.count() + pw.bias.count() == 160);
  CHECK(dw.weight.count() + dw.bias.count() == 896);

  MedNeXt<float> tiny(spec_tiny());
  auto pc = count_parameters(tiny);
  CHECK(pc.total == 8979);
  CHECK(pc.total == oracle_count(2, 3, 4, 3, 2));
  int64_t sum = 0;
  for (const auto& [k, v] : pc.by_submodule) sum += v;
  CHECK(sum == pc.total);
  CHECK(pc.by_submodule.at("backbone.stem") == 2 * 4 + 4);
  CHECK(pc.by_submodule.at("backbone.head") == 4 * 3 + 3);
  CHECK(pc.adapters() == 0);

  MedNeXt<float> s(ModelConfig::mednext_s());
  const auto ps = count_parameters(s);
  CHECK(ps.total == oracle_count(4, 4, 32, 5, 2));
  CHECK(ps.total == 5551076);
  CHECK(backbone_parameter_count(ModelConfig::mednext_s()) == ps.total);
  CHECK(backbone_parameter_count(ModelConfig::tiny()) == 28156);
  CHECK(s.block_paths().size() == 9 * 2 + 8);
}

TEST_CASE("submodule keys") {
  CHECK(submodule_of("backbone.enc.0.1.dw.weight") == "backbone.enc.0.1");
  CHECK(submodule_of("adapter.dec.2.1.pl.bias") == "adapter.dec.2.1");
  CHECK(submodule_of("backbone.stem.conv.weight") == "backbone.stem");
}

TEST_CASE("every parameter receives gradient") {
  MedNeXt<double> m(spec_tiny());
  auto x = random_tensor<double>({2, 8, 8, 8}, 10);
  auto y = m.forward(x, true);
  m.zero_grad();
  m.backward(random_tensor<double>(y.shape(), 11));
  for (auto& p : m.named_parameters()) {
    double norm = 0.0;
    for (auto g : p.param->grad.values()) norm += g * g;
    CHECK_MESSAGE(norm > 0.0, p.name);
  }
}

TEST_CASE("finite differences on a tiny backbone") {
  MedNeXt<double> m(spec_tiny());
  auto x = random_tensor<double>({2, 8, 8, 8}, 12);
  auto r = random_tensor<double>({3, 8, 8, 8}, 13);
  m.forward(x, true);
  m.zero_grad();
  m.backward(r);
  auto params = m.named_parameters();
  auto loss = [&] { return testutil::dot(m.forward(x, false), r); };
  auto res = testutil::finite_difference_check(params, loss, 20, 14);
  CHECK(res.checked == 20);
  CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("deep supervision heads") {
  ModelConfig c = spec_tiny();
  c.deep_supervision = true;
  MedNeXt<double> m(c);
  auto x = random_tensor<double>({2, 8, 8, 8}, 15);
  auto y = m.forward(x, true);
  REQUIRE(m.aux_logits().size() == 1);
  CHECK(m.aux_logits()[0].shape() == std::vector<int64_t>{3, 4, 4, 4});
  CHECK(count_parameters(m).total == backbone_parameter_count(c));
  CHECK(backbone_parameter_count(c) == 8979 + 8 * 3 + 3);

  std::vector<Tensor<double>> ga{random_tensor<double>({3, 4, 4, 4}, 16)};
  auto r = random_tensor<double>(y.shape(), 17);
  m.zero_grad();
  m.backward(r, &ga);
  auto params = m.named_parameters();
  auto loss = [&] {
    auto out = m.forward(x, true);
    return testutil::dot(out, r) + testutil::dot(m.aux_logits()[0], ga[0]);
  };
  auto res = testutil::finite_difference_check(params, loss, 20, 18);
  CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("translation covariance away from borders") {
  // Two levels keep the receptive field small enough that content and border
  // effects never meet inside a 48^3 grid.
  ModelConfig c = spec_tiny();
  c.n_levels = 2;
  MedNeXt<double> m(c);
  const int64_t n = 48;
  const int64_t shift = c.spatial_multiple();
  Tensor<double> x({2, n, n, n});
  auto blob = random_tensor<double>({2, 7, 7, 7}, 19);
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j)
        for (int k = 0; k < 7; ++k) x.at(ch, 20 + i, 20 + j, 20 + k) = blob.at(ch, i, j, k);
  Tensor<double> xs(x.shape());
  for (int ch = 0; ch < 2; ++ch)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        for (int64_t k = 0; k < n; ++k) xs.at(ch, (i + shift) % n, j, k) = x.at(ch, i, j, k);
  auto y = m.forward(x, false);
  auto ys = m.forward(xs, false);
  const int64_t margin = 12;
  double worst = 0.0;
  for (int ch = 0; ch < 3; ++ch)
    for (int64_t i = margin; i + shift < n - margin; ++i)
      for (int64_t j = margin; j < n - margin; ++j)
        for (int64_t k = margin; k < n - margin; ++k)
          worst = std::max(worst, std::fabs(y.at(ch, i, j, k) - ys.at(ch, i + shift, j, k)));
  CHECK(worst < 1e-4);
}

TEST_CASE("partial freezing truncates backward without changing trainable gradients") {
  MedNeXt<double> a(spec_tiny());
  MedNeXt<double> b(spec_tiny());
  auto x = random_tensor<double>({2, 8, 8, 8}, 20);
  auto r = random_tensor<double>({3, 8, 8, 8}, 21);
  for (auto& p : b.named_parameters()) {
    if (p.name.rfind("backbone.dec.", 0) != 0 && p.name.rfind("backbone.head.", 0) != 0) p.param->trainable = false;
  }
  a.forward(x, true);
  a.zero_grad();
  a.backward(r);
  b.forward(x, true);
  b.zero_grad();
  b.backward(r);
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    if (!pb[i].param->trainable) {
      CHECK(testutil::max_abs_diff(pb[i].param->grad, Tensor<double>(pb[i].param->grad.shape())) == 0.0);
    } else {
      CHECK(testutil::max_abs_diff(pa[i].param->grad, pb[i].param->grad) < 1e-12);
    }
  }
}
