#include "helpers.hpp"
#include "oracles.hpp"

#include "mdpg/backbone.hpp"
#include "mdpg/denoiser.hpp"
#include "mdpg/vae.hpp"

#include <set>

using namespace mdpg;
using oracle::Map;
using testing::gradcheck;
using testing::randn;
using testing::randomize;
using Rows = std::vector<std::vector<double>>;

namespace {

Rows project(const torch::nn::Linear& lin, const Rows& x) {
  auto w = oracle::mat(lin->weight);
  auto b = lin->bias.defined() ? oracle::vec(lin->bias) : std::vector<double>();
  Rows out;
  for (auto& r : x) out.push_back(oracle::affine(w, b, r));
  return out;
}

// Scalar-loop LGA over one sequence of tokens x (L, C) with latents z (L, Cz).
Rows lga_oracle(Lga& m, const Rows& x, const Rows& z) {
  const auto C = m->config().channels, heads = m->config().heads, dk = C / heads;
  const auto L = x.size();
  auto gx = oracle::vec(m->norm_x->weight), bx = oracle::vec(m->norm_x->bias);
  auto gz = oracle::vec(m->norm_z->weight), bz = oracle::vec(m->norm_z->bias);
  Rows xm(L);
  for (std::size_t i = 0; i < L; ++i) {
    auto zn = oracle::layer_norm(z[i], gz, bz, m->config().latent_norm_eps);
    auto s = oracle::affine(oracle::mat(m->w_z->weight), oracle::vec(m->w_z->bias), zn);
    for (auto& v : s) v = oracle::silu(v);
    auto xn = oracle::layer_norm(x[i], gx, bx, 1e-6);
    xm[i].resize(C);
    for (int c = 0; c < C; ++c) xm[i][c] = xn[c] * s[c] + s[C + c];
  }
  auto q = project(m->w_q, xm), k = project(m->w_k, xm), v = project(m->w_v, xm);
  Rows att(L, std::vector<double>(C, 0.0));
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L);
      double mx = -1e300;
      for (std::size_t j = 0; j < L; ++j) {
        double dot = 0;
        for (int d = 0; d < dk; ++d) dot += q[i][h * dk + d] * k[j][h * dk + d];
        s[j] = dot / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double norm = 0;
      for (auto& e : s) norm += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < L; ++j)
        for (int d = 0; d < dk; ++d) att[i][h * dk + d] += s[j] / norm * v[j][h * dk + d];
    }
  }
  auto o = project(m->w_o, att);
  for (std::size_t i = 0; i < L; ++i)
    for (int c = 0; c < C; ++c) o[i][c] += x[i][c];
  return o;
}

// Map (C, H, W) -> per-pixel rows in the given 2x2-style enumeration order.
std::vector<std::pair<int, int>> order_pixels(int H, int W, ScanOrder order) {
  std::vector<std::pair<int, int>> px;
  const bool cols = order == ScanOrder::ColForward || order == ScanOrder::ColBackward;
  if (!cols) {
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) px.emplace_back(r, c);
  } else {
    for (int c = 0; c < W; ++c)
      for (int r = 0; r < H; ++r) px.emplace_back(r, c);
  }
  if (order == ScanOrder::RowBackward || order == ScanOrder::ColBackward) std::reverse(px.begin(), px.end());
  return px;
}

Rows scan1d_oracle(SelectiveScan1d& s, const Rows& u) {
  auto delta = project(s->delta_proj, u);
  for (auto& r : delta)
    for (auto& v : r) v = oracle::softplus(v);
  auto B = project(s->B_proj, u), C = project(s->C_proj, u);
  auto A = oracle::rows_of(s->A());
  return oracle::scan(u, delta, A, B, C, oracle::vec(s->D_skip));
}

// SS2D block on one (C, H, W) map, every stage written out as loops.
Map ss2d_oracle(Ss2dBlock& blk, const Map& x) {
  const int C = static_cast<int>(x.size()), H = static_cast<int>(x[0].size()), W = static_cast<int>(x[0][0].size());
  auto g1 = oracle::vec(blk->norm_in->weight), b1 = oracle::vec(blk->norm_in->bias);
  auto g2 = oracle::vec(blk->norm_out->weight), b2 = oracle::vec(blk->norm_out->bias);
  auto win = oracle::mat(blk->in_proj->weight);
  auto bin = oracle::vec(blk->in_proj->bias);
  Map xs(C, std::vector<std::vector<double>>(H, std::vector<double>(W)));
  Map zs = xs;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      std::vector<double> px(C);
      for (int k = 0; k < C; ++k) px[k] = x[k][r][c];
      auto p = oracle::affine(win, bin, oracle::layer_norm(px, g1, b1, 1e-5));
      for (int k = 0; k < C; ++k) {
        xs[k][r][c] = p[k];
        zs[k][r][c] = p[C + k];
      }
    }
  auto feat = oracle::apply(oracle::conv2d(xs, blk->dwconv->weight, blk->dwconv->bias, C), oracle::silu);
  Map merged(C, std::vector<std::vector<double>>(H, std::vector<double>(W, 0.0)));
  for (int d = 0; d < 4; ++d) {
    auto px = order_pixels(H, W, static_cast<ScanOrder>(d));
    Rows u;
    for (auto [r, c] : px) {
      std::vector<double> v(C);
      for (int k = 0; k < C; ++k) v[k] = feat[k][r][c];
      u.push_back(v);
    }
    auto y = scan1d_oracle(blk->scans[d], u);
    for (std::size_t i = 0; i < px.size(); ++i)
      for (int k = 0; k < C; ++k) merged[k][px[i].first][px[i].second] += y[i][k];
  }
  auto wout = oracle::mat(blk->out_proj->weight);
  auto bout = oracle::vec(blk->out_proj->bias);
  Map out = x;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      std::vector<double> m(C);
      for (int k = 0; k < C; ++k) m[k] = merged[k][r][c];
      auto n = oracle::layer_norm(m, g2, b2, 1e-5);
      for (int k = 0; k < C; ++k) n[k] *= oracle::silu(zs[k][r][c]);
      auto o = oracle::affine(wout, bout, n);
      for (int k = 0; k < C; ++k) out[k][r][c] += o[k];
    }
  return out;
}

Map resblock_oracle(const Map& x, const std::map<std::string, Tensor>& p, const std::string& pre) {
  auto h = oracle::conv2d(oracle::apply(x, oracle::silu), p.at(pre + "conv1.weight"), p.at(pre + "conv1.bias"));
  h = oracle::conv2d(oracle::apply(h, oracle::silu), p.at(pre + "conv2.weight"), p.at(pre + "conv2.bias"));
  return oracle::add(x, h);
}

// Complex channel-pair maps through the naive centred DFT.
Map dft_map(const Map& m, bool inverse) {
  const int C = static_cast<int>(m.size()) / 2;
  std::vector<oracle::Grid> gs;
  auto t = oracle::tensor_from(m);
  for (int c = 0; c < C; ++c) gs.push_back(oracle::centered_dft(oracle::grid_from(t, c), inverse));
  return oracle::map_from(oracle::tensor_from(gs));
}

Map dfb_oracle(Dfb& dfb, const Map& xu, const Map& xbar) {
  const auto sig = dfb->config().gate == GateActivation::Sigmoid;
  auto a = oracle::conv2d(dft_map(xu, false), dfb->sigma_x->weight, dfb->sigma_x->bias);
  auto b = oracle::conv2d(dft_map(xbar, false), dfb->sigma_y->weight, dfb->sigma_y->bias);
  const int F2 = static_cast<int>(a.size()), H = static_cast<int>(a[0].size()), W = static_cast<int>(a[0][0].size());
  std::vector<double> pooled(F2, 0.0);
  for (int c = 0; c < F2; ++c)
    for (int r = 0; r < H; ++r)
      for (int k = 0; k < W; ++k) pooled[c] += (a[c][r][k] + b[c][r][k]) / (H * W);
  auto t1 = oracle::affine(oracle::mat(dfb->sigma_1->weight), oracle::vec(dfb->sigma_1->bias), pooled);
  auto t2 = oracle::affine(oracle::mat(dfb->sigma_2->weight), oracle::vec(dfb->sigma_2->bias), pooled);
  Map mix = a;
  for (int c = 0; c < F2; ++c) {
    const double ga = sig ? oracle::sigmoid(t1[c]) : oracle::silu(t1[c]);
    const double gb = sig ? oracle::sigmoid(t2[c]) : oracle::silu(t2[c]);
    for (int r = 0; r < H; ++r)
      for (int k = 0; k < W; ++k) mix[c][r][k] = a[c][r][k] * ga + b[c][r][k] * gb;
  }
  auto f = oracle::conv2d(mix, dfb->sigma_kout->weight, dfb->sigma_kout->bias);
  Map cat = xu;
  cat.insert(cat.end(), xbar.begin(), xbar.end());
  auto params = dfb->named_parameters();
  std::map<std::string, Tensor> p;
  for (auto& kv : params) p[kv.key()] = kv.value();
  auto g = oracle::conv2d(cat, dfb->g_in->weight, dfb->g_in->bias);
  for (std::size_t i = 0; i < dfb->g_blocks.size(); ++i) g = resblock_oracle(g, p, "g_block" + std::to_string(i) + ".");
  g = oracle::conv2d(g, dfb->g_out->weight, dfb->g_out->bias);
  return oracle::conv2d(oracle::add(dft_map(f, true), g), dfb->sigma_iout->weight, dfb->sigma_iout->bias);
}

double max_diff(const Rows& a, const Tensor& b2d) {
  auto r = oracle::rows_of(b2d);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - r[i][j]));
  return m;
}

double max_diff(const Map& a, const Tensor& b3d) {
  auto r = oracle::map_from(b3d);
  double m = 0;
  for (std::size_t c = 0; c < a.size(); ++c)
    for (std::size_t i = 0; i < a[c].size(); ++i)
      for (std::size_t j = 0; j < a[c][i].size(); ++j) m = std::max(m, std::abs(a[c][i][j] - r[c][i][j]));
  return m;
}

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.widths = {8, 16};
  c.patch = 4;
  c.state_dim = 4;
  c.heads = 2;
  c.decoder_width = 8;
  c.dfb.kspace_features = 2;
  c.dfb.res_width = 8;
  c.dfb.res_blocks = 1;
  return c;
}

}  // namespace

TEST_SUITE("oracles") {
  TEST_CASE("selective scan matches the unrolled recurrence") {
    for (int L : {1, 3, 8}) {
      const int Bt = 2, D = 3, N = 4;
      auto u = randn({Bt, L, D}, 1), delta = torch::softplus(randn({Bt, L, D}, 2));
      auto A = -torch::exp(randn({D, N}, 3) * 0.5), B = randn({Bt, L, N}, 4), C = randn({Bt, L, N}, 5);
      auto Dk = randn({D}, 6);
      auto y = selective_scan(u, delta, A, B, C, Dk);
      for (int b = 0; b < Bt; ++b) {
        auto ref = oracle::scan(oracle::rows_of(u[b]), oracle::rows_of(delta[b]), oracle::rows_of(A),
                                oracle::rows_of(B[b]), oracle::rows_of(C[b]), oracle::vec(Dk));
        CHECK(max_diff(ref, y[b]) < 1e-10);
      }
    }
  }

  TEST_CASE("hand-unrolled two-step scan") {
    // D = N = 1: h1 = d1 u1 B1, h2 = exp(d2 A) h1 + d2 u2 B2.
    auto u = torch::tensor({0.7, -1.3}, torch::kFloat64).view({1, 2, 1});
    auto d = torch::tensor({0.4, 0.9}, torch::kFloat64).view({1, 2, 1});
    auto A = torch::tensor({-0.8}, torch::kFloat64).view({1, 1});
    auto B = torch::tensor({1.5, -0.2}, torch::kFloat64).view({1, 2, 1});
    auto C = torch::tensor({0.3, 2.0}, torch::kFloat64).view({1, 2, 1});
    auto Dk = torch::tensor({0.25}, torch::kFloat64);
    auto y = selective_scan(u, d, A, B, C, Dk);
    const double h1 = 0.4 * 0.7 * 1.5;
    const double h2 = std::exp(0.9 * -0.8) * h1 + 0.9 * -1.3 * -0.2;
    CHECK(std::abs(y[0][0][0].item<double>() - (0.3 * h1 + 0.25 * 0.7)) < 1e-14);
    CHECK(std::abs(y[0][1][0].item<double>() - (2.0 * h2 + 0.25 * -1.3)) < 1e-14);
  }

  TEST_CASE("2x2 scan orders enumerate pixels as expected") {
    auto x = torch::arange(4, torch::kFloat64).view({1, 1, 2, 2});  // value = 2r + c
    auto seq = [&](ScanOrder o) { return oracle::vec(scan_sequence(x, o)); };
    CHECK(seq(ScanOrder::RowForward) == std::vector<double>{0, 1, 2, 3});
    CHECK(seq(ScanOrder::RowBackward) == std::vector<double>{3, 2, 1, 0});
    CHECK(seq(ScanOrder::ColForward) == std::vector<double>{0, 2, 1, 3});
    CHECK(seq(ScanOrder::ColBackward) == std::vector<double>{3, 1, 2, 0});
    auto y = randn({2, 3, 4, 6}, 9);
    for (int o = 0; o < 4; ++o) {
      auto order = static_cast<ScanOrder>(o);
      CHECK(testing::max_abs(unscan_sequence(scan_sequence(y, order), order, 4, 6) - y) == 0.0);
    }
  }

  TEST_CASE("SS2D block matches the 2x2 enumeration oracle") {
    torch::manual_seed(3);
    Ss2dBlock blk(Ss2dConfig{4, 3});
    blk->to(torch::kFloat64);
    randomize(*blk, 4);
    for (auto [h, w] : {std::pair{2, 2}, std::pair{2, 3}}) {
      auto x = randn({1, 4, h, w}, 5 + w);
      auto y = blk->forward(x);
      CHECK(max_diff(ss2d_oracle(blk, oracle::map_from(x[0])), y[0]) < 1e-10);
    }
  }

  TEST_CASE("LGA matches the scalar attention oracle") {
    torch::manual_seed(1);
    for (int L : {1, 2, 4}) {
      Lga m(LgaConfig{4, 3, 2});
      m->to(torch::kFloat64);
      randomize(*m, 7 + L);
      auto x = randn({2, L, 4}, 11), z = randn({2, L, 3}, 12);
      auto y = m->forward_tokens(x, z);
      for (int b = 0; b < 2; ++b) {
        CHECK(max_diff(lga_oracle(m, oracle::rows_of(x[b]), oracle::rows_of(z[b])), y[b]) < 1e-10);
      }
    }
  }

  TEST_CASE("LGA attention rows sum to one and the map form matches token form") {
    torch::manual_seed(2);
    Lga m(LgaConfig{8, 4, 2});
    m->to(torch::kFloat64);
    randomize(*m, 1);
    auto x = randn({1, 8, 2, 2}, 3), z = randn({1, 4, 2, 2}, 4);
    auto w = m->attention_weights(x.flatten(2).transpose(1, 2), latent_tokens(z, 2, 2));
    CHECK(testing::max_abs(w.sum(-1) - 1) < 1e-12);
    auto tok = m->forward_tokens(x.flatten(2).transpose(1, 2), z.flatten(2).transpose(1, 2));
    CHECK(testing::max_abs(m->forward(x, z) - tok.transpose(1, 2).reshape({1, 8, 2, 2})) < 1e-12);
  }

  TEST_CASE("LGA starts as the identity") {
    torch::manual_seed(2);
    Lga m(LgaConfig{8, 4, 2});
    auto x = torch::randn({1, 8, 4, 4}), z = torch::randn({1, 4, 1, 1});
    CHECK(testing::max_abs(m->forward(x, z) - x) == 0.0);
  }

  TEST_CASE("DFB matches the 4x4 step-by-step oracle") {
    for (auto gate : {GateActivation::Sigmoid, GateActivation::SiLU}) {
      torch::manual_seed(5);
      Dfb dfb(DfbConfig{2, 4, 1, gate});
      dfb->to(torch::kFloat64);
      randomize(*dfb, 6);
      auto xu = randn({1, 2, 4, 4}, 7), xb = randn({1, 2, 4, 4}, 8);
      auto y = dfb->forward(xu, xb);
      CHECK(max_diff(dfb_oracle(dfb, oracle::map_from(xu[0]), oracle::map_from(xb[0])), y[0]) < 1e-8);
    }
  }

  TEST_CASE("DFB rejects mismatched inputs") {
    Dfb dfb(DfbConfig{});
    CHECK_THROWS_AS(dfb->forward(torch::zeros({1, 2, 16, 16}), torch::zeros({1, 2, 16, 32})), ShapeError);
  }
}

TEST_SUITE("gradients") {
  TEST_CASE("selective scan backward") {
    auto u = randn({2, 5, 3}, 1).requires_grad_(), delta = torch::softplus(randn({2, 5, 3}, 2)).requires_grad_();
    auto A = (-torch::exp(randn({3, 4}, 3) * 0.5)).requires_grad_();
    auto B = randn({2, 5, 4}, 4).requires_grad_(), C = randn({2, 5, 4}, 5).requires_grad_();
    auto D = randn({3}, 6).requires_grad_();
    auto w = randn({2, 5, 3}, 7);
    auto loss = [&] { return (selective_scan(u, delta, A, B, C, D) * w).sum(); };
    std::uint64_t s = 10;
    for (auto& p : {u, delta, A, B, C, D}) CHECK(gradcheck(loss, p, s++) < 1e-3);
  }

  TEST_CASE("SS2D block") {
    torch::manual_seed(1);
    Ss2dBlock blk(Ss2dConfig{4, 3});
    blk->to(torch::kFloat64);
    randomize(*blk, 2);
    auto x = randn({1, 4, 3, 3}, 3).requires_grad_();
    auto w = randn({1, 4, 3, 3}, 4);
    auto loss = [&] { return (blk->forward(x) * w).sum(); };
    CHECK(gradcheck(loss, x, 5) < 1e-3);
    CHECK(gradcheck(loss, blk->scans[1]->A_log, 6) < 1e-3);
    CHECK(gradcheck(loss, blk->in_proj->weight, 7) < 1e-3);
    CHECK(gradcheck(loss, blk->dwconv->weight, 8) < 1e-3);
  }

  TEST_CASE("LGA") {
    torch::manual_seed(2);
    Lga m(LgaConfig{4, 3, 2});
    m->to(torch::kFloat64);
    randomize(*m, 3);
    auto x = randn({2, 4, 4}, 4).requires_grad_(), z = randn({2, 4, 3}, 5).requires_grad_();
    auto w = randn({2, 4, 4}, 6);
    auto loss = [&] { return (m->forward_tokens(x, z) * w).sum(); };
    CHECK(gradcheck(loss, x, 7) < 1e-3);
    CHECK(gradcheck(loss, z, 8) < 1e-3);
    CHECK(gradcheck(loss, m->w_q->weight, 9) < 1e-3);
    CHECK(gradcheck(loss, m->w_z->weight, 10) < 1e-3);
  }

  TEST_CASE("DFB") {
    torch::manual_seed(3);
    Dfb dfb(DfbConfig{2, 4, 1, GateActivation::Sigmoid});
    dfb->to(torch::kFloat64);
    randomize(*dfb, 4);
    auto xu = randn({1, 2, 8, 8}, 5).requires_grad_(), xb = randn({1, 2, 8, 8}, 6).requires_grad_();
    auto w = randn({1, 2, 8, 8}, 7);
    auto loss = [&] { return (dfb->forward(xu, xb) * w).sum(); };
    CHECK(gradcheck(loss, xu, 8) < 1e-3);
    CHECK(gradcheck(loss, xb, 9) < 1e-3);
    CHECK(gradcheck(loss, dfb->sigma_1->weight, 10) < 1e-3);
    CHECK(gradcheck(loss, dfb->sigma_x->weight, 11) < 1e-3);
  }

  TEST_CASE("data consistency") {
    auto xp = randn({1, 2, 8, 8}, 1).requires_grad_();
    auto y = fft2c(randn({1, 2, 8, 8}, 2));
    auto m = torch::tensor({1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0}, torch::kFloat64).view({1, 1, 1, 8});
    y = y * m;
    auto nu = torch::tensor(0.7, torch::kFloat64).requires_grad_();
    auto w = randn({1, 2, 8, 8}, 3);
    auto loss = [&] { return (data_consistency(xp, y, m, nu) * w).sum(); };
    CHECK(gradcheck(loss, xp, 4) < 1e-3);
    CHECK(gradcheck(loss, nu, 5, 1) < 1e-3);
  }

  TEST_CASE("denoiser") {
    torch::manual_seed(4);
    Denoiser d(DenoiserConfig{2, 2, 8, 16});
    d->to(torch::kFloat64);
    randomize(*d, 5, 0.1);
    auto zt = randn({1, 2, 4, 4}, 6).requires_grad_(), c = randn({1, 2, 4, 4}, 7);
    auto t = torch::tensor({37}, torch::kLong);
    auto w = randn({1, 2, 4, 4}, 8);
    auto loss = [&] { return (d->forward(zt, c, t) * w).sum(); };
    CHECK(gradcheck(loss, zt, 9) < 1e-3);
  }

  TEST_CASE("full backbone") {
    torch::manual_seed(6);
    Backbone net(tiny_backbone(), AblationConfig{});
    net->to(torch::kFloat64);
    randomize(*net, 7, 0.1);
    auto mask = make_cartesian_mask(16, 4, 0.08, 2).tensor(torch::kFloat64).view({1, 1, 1, 16});
    auto x = randn({1, 2, 16, 16}, 8);
    auto y = fft2c(x) * mask;
    auto xu = ifft2c(y);
    auto z0 = randn({1, 4, 1, 1}, 9), xb = randn({1, 2, 16, 16}, 10);
    auto w = randn({1, 2, 16, 16}, 15);
    auto loss = [&] { return (net->forward(xu, z0, xb, y, mask).xhat * w).sum(); };
    CHECK(gradcheck(loss, net->nu, 11, 1) < 1e-3);
    CHECK(gradcheck(loss, net->stem->weight, 12) < 1e-3);
    CHECK(gradcheck(loss, net->lgas[0]->w_k->weight, 13) < 1e-3);
    CHECK(gradcheck(loss, net->dfb->sigma_y->weight, 14) < 1e-3);
  }
}

TEST_SUITE("shapes") {
  TEST_CASE("VAE compresses 16x spatially") {
    torch::manual_seed(0);
    Vae vae(VaeConfig{4, 8, 1e-6});
    torch::NoGradGuard g;
    auto z = vae->encode(torch::randn({2, 2, 64, 64}));
    CHECK(z.sizes() == torch::IntArrayRef({2, 4, 4, 4}));
    CHECK(vae->decode(z).sizes() == torch::IntArrayRef({2, 2, 64, 64}));
    auto z320 = vae->encode(torch::randn({1, 2, 320, 320}));
    CHECK(z320.sizes() == torch::IntArrayRef({1, 4, 20, 20}));
    CHECK_THROWS_AS(vae->encode(torch::randn({1, 2, 40, 64})), ShapeError);
  }

  TEST_CASE("backbone output shape and identity at initialisation") {
    torch::manual_seed(1);
    auto cfg = tiny_backbone();
    Backbone net(cfg, AblationConfig{});
    auto mask = make_cartesian_mask(32, 4, 0.08, 3).tensor().view({1, 1, 1, 32});
    auto x = torch::randn({2, 2, 32, 32});
    auto y = fft2c(x) * mask;
    auto xu = ifft2c(y);
    torch::NoGradGuard g;
    auto out = net->forward(xu, torch::randn({2, 4, 2, 2}), torch::randn({2, 2, 32, 32}), y, mask);
    CHECK(out.xhat.sizes() == x.sizes());
    // zero-initialised head and fusion output: the network starts at the zero-filled input
    CHECK(testing::max_abs(out.xhat_prime - xu) < 1e-6);
    CHECK_THROWS_AS(net->forward(xu, Tensor(), torch::randn({2, 2, 32, 32}), y, mask), ConfigError);
  }

  TEST_CASE("ablation switches remove exactly their parameters") {
    auto names = [](const AblationConfig& a) {
      Backbone net(tiny_backbone(), a);
      std::set<std::string> s;
      for (auto& kv : net->named_parameters()) s.insert(kv.key());
      return s;
    };
    const auto full = names(AblationConfig{});
    auto without = [&](auto fn) {
      AblationConfig a;
      fn(a);
      return names(a);
    };
    auto noA = without([](AblationConfig& a) { a.A_dfb = false; });
    auto noB = without([](AblationConfig& a) { a.B_lga = false; });
    for (auto& n : full) {
      CHECK((noA.count(n) == 1) == (n.rfind("dfb.", 0) != 0));
      CHECK((noB.count(n) == 1) == (n.rfind("lga", 0) != 0));
    }
    CHECK(without([](AblationConfig& a) { a.C_sigmoid_gate = false; }) == full);
    CHECK(without([](AblationConfig& a) { a.E_dfb_before_encoder = false; }) == full);
    CHECK(without([](AblationConfig& a) { a.F_nacs_reg = false; }) == full);

    AblationConfig noD;
    noD.D_learnable_nu = false;
    Backbone net(tiny_backbone(), noD);
    for (auto& p : net->trainable_parameters()) CHECK_FALSE(p.is_same(net->nu));
    CHECK_FALSE(net->nu.requires_grad());
  }

  TEST_CASE("nine ablation rows, last is the full model") {
    auto rows = ablation_rows();
    REQUIRE(rows.size() == 9);
    CHECK(rows.back() == AblationConfig{});
    std::set<std::string> labels;
    for (auto& r : rows) labels.insert(r.label());
    CHECK(labels.size() == 9);
    for (auto& r : rows) CHECK(AblationConfig::from_json(r.to_json()) == r);
  }
}
