#include "mdpg/selective_scan.hpp"

#include "mdpg/nn_blocks.hpp"

#include <cmath>

namespace mdpg {

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

template <typename T>
void scan_forward(std::int64_t batch, std::int64_t L, std::int64_t D, std::int64_t N, const T* u, const T* delta,
                  const T* A, const T* B, const T* C, const T* Dskip, T* y, T* states) {
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < L; ++i) {
      const T* ui = u + (b * L + i) * D;
      const T* di = delta + (b * L + i) * D;
      const T* Bi = B + (b * L + i) * N;
      const T* Ci = C + (b * L + i) * N;
      T* hi = states + (b * L + i) * D * N;
      const T* hp = i > 0 ? hi - D * N : nullptr;
      T* yi = y + (b * L + i) * D;
      for (std::int64_t d = 0; d < D; ++d) {
        T acc = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T a = std::exp(di[d] * A[d * N + n]);
          const T prev = hp ? hp[d * N + n] : T(0);
          const T h = a * prev + di[d] * ui[d] * Bi[n];
          hi[d * N + n] = h;
          acc += Ci[n] * h;
        }
        yi[d] = acc + Dskip[d] * ui[d];
      }
    }
  }
}

template <typename T>
void scan_backward(std::int64_t batch, std::int64_t L, std::int64_t D, std::int64_t N, const T* u, const T* delta,
                   const T* A, const T* B, const T* C, const T* Dskip, const T* states, const T* gy, T* gu,
                   T* gdelta, T* gA, T* gB, T* gC, T* gD) {
  std::vector<T> carry(D * N);
  for (std::int64_t b = 0; b < batch; ++b) {
    std::fill(carry.begin(), carry.end(), T(0));
    for (std::int64_t i = L - 1; i >= 0; --i) {
      const std::int64_t row = b * L + i;
      const T* ui = u + row * D;
      const T* di = delta + row * D;
      const T* Bi = B + row * N;
      const T* Ci = C + row * N;
      const T* hi = states + row * D * N;
      const T* hp = i > 0 ? hi - D * N : nullptr;
      const T* gyi = gy + row * D;
      T* gui = gu + row * D;
      T* gdi = gdelta + row * D;
      T* gBi = gB + row * N;
      T* gCi = gC + row * N;
      for (std::int64_t d = 0; d < D; ++d) {
        T gdel = 0, guu = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const std::int64_t k = d * N + n;
          const T a = std::exp(di[d] * A[k]);
          const T g = gyi[d] * Ci[n] + carry[k];
          gCi[n] += gyi[d] * hi[k];
          const T ga = g * (hp ? hp[k] : T(0));
          gdel += ga * a * A[k] + g * ui[d] * Bi[n];
          gA[k] += ga * a * di[d];
          guu += g * di[d] * Bi[n];
          gBi[n] += g * di[d] * ui[d];
          carry[k] = g * a;
        }
        gdi[d] += gdel;
        gui[d] += guu + gyi[d] * Dskip[d];
        gD[d] += gyi[d] * ui[d];
      }
    }
  }
}

struct SelectiveScanFn : torch::autograd::Function<SelectiveScanFn> {
  static Tensor forward(AutogradContext* ctx, const Tensor& u, const Tensor& delta, const Tensor& A,
                        const Tensor& B, const Tensor& C, const Tensor& D) {
    auto uc = u.contiguous(), dc = delta.contiguous(), Ac = A.contiguous(), Bc = B.contiguous(),
         Cc = C.contiguous(), Dc = D.contiguous();
    const auto batch = uc.size(0), L = uc.size(1), Dn = uc.size(2), N = Ac.size(1);
    auto y = torch::empty_like(uc);
    auto states = torch::empty({batch, L, Dn, N}, uc.options());
    AT_DISPATCH_FLOATING_TYPES(uc.scalar_type(), "selective_scan_forward", [&] {
      scan_forward<scalar_t>(batch, L, Dn, N, uc.data_ptr<scalar_t>(), dc.data_ptr<scalar_t>(),
                             Ac.data_ptr<scalar_t>(), Bc.data_ptr<scalar_t>(), Cc.data_ptr<scalar_t>(),
                             Dc.data_ptr<scalar_t>(), y.data_ptr<scalar_t>(), states.data_ptr<scalar_t>());
    });
    ctx->save_for_backward({uc, dc, Ac, Bc, Cc, Dc, states});
    return y;
  }

  static variable_list backward(AutogradContext* ctx, variable_list grads) {
    auto saved = ctx->get_saved_variables();
    auto &u = saved[0], &delta = saved[1], &A = saved[2], &B = saved[3], &C = saved[4], &D = saved[5],
         &states = saved[6];
    auto gy = grads[0].contiguous();
    const auto batch = u.size(0), L = u.size(1), Dn = u.size(2), N = A.size(1);
    auto gu = torch::zeros_like(u), gdelta = torch::zeros_like(delta), gA = torch::zeros_like(A),
         gB = torch::zeros_like(B), gC = torch::zeros_like(C), gD = torch::zeros_like(D);
    AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "selective_scan_backward", [&] {
      scan_backward<scalar_t>(batch, L, Dn, N, u.data_ptr<scalar_t>(), delta.data_ptr<scalar_t>(),
                              A.data_ptr<scalar_t>(), B.data_ptr<scalar_t>(), C.data_ptr<scalar_t>(),
                              D.data_ptr<scalar_t>(), states.data_ptr<scalar_t>(), gy.data_ptr<scalar_t>(),
                              gu.data_ptr<scalar_t>(), gdelta.data_ptr<scalar_t>(), gA.data_ptr<scalar_t>(),
                              gB.data_ptr<scalar_t>(), gC.data_ptr<scalar_t>(), gD.data_ptr<scalar_t>());
    });
    return {gu, gdelta, gA, gB, gC, gD};
  }
};

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& D) {
  if (u.dim() != 3 || delta.sizes() != u.sizes()) throw ShapeError("selective_scan: u/delta must be (Bt, L, D)");
  if (A.dim() != 2 || A.size(0) != u.size(2)) throw ShapeError("selective_scan: A must be (D, N)");
  const std::vector<std::int64_t> bn{u.size(0), u.size(1), A.size(1)};
  if (B.sizes() != c10::IntArrayRef(bn) || C.sizes() != c10::IntArrayRef(bn)) {
    throw ShapeError("selective_scan: B/C must be (Bt, L, N)");
  }
  if (D.dim() != 1 || D.size(0) != u.size(2)) throw ShapeError("selective_scan: D must be (D,)");
  if (u.size(1) < 1) throw ShapeError("selective_scan: empty sequence");
  return SelectiveScanFn::apply(u, delta, A, B, C, D);
}

SelectiveScan1dImpl::SelectiveScan1dImpl(ScanConfig cfg) : cfg_(cfg) {
  const auto d = cfg_.channels, n = cfg_.state_dim;
  delta_proj = register_module("delta_proj", torch::nn::Linear(d, d));
  B_proj = register_module("B_proj", torch::nn::Linear(torch::nn::LinearOptions(d, n).bias(false)));
  C_proj = register_module("C_proj", torch::nn::Linear(torch::nn::LinearOptions(d, n).bias(false)));
  auto a = torch::arange(1, n + 1, torch::kFloat).repeat({d, 1});
  A_log = register_parameter("A_log", torch::log(a));
  D_skip = register_parameter("D_skip", torch::ones({d}));
  torch::NoGradGuard no_grad;
  // dt ~ log-uniform in [dt_min, dt_max]; bias is its inverse softplus.
  auto dt = torch::exp(torch::rand({d}) * (std::log(cfg_.dt_max) - std::log(cfg_.dt_min)) + std::log(cfg_.dt_min));
  delta_proj->bias.copy_(dt + torch::log(-torch::expm1(-dt)));
}

Tensor SelectiveScan1dImpl::forward(const Tensor& u) {
  auto delta = torch::softplus(delta_proj(u));
  return selective_scan(u, delta, A(), B_proj(u), C_proj(u), D_skip);
}

Tensor scan_sequence(const Tensor& x, ScanOrder order) {
  switch (order) {
    case ScanOrder::RowForward: return x.flatten(2).transpose(1, 2);
    case ScanOrder::RowBackward: return x.flatten(2).transpose(1, 2).flip({1});
    case ScanOrder::ColForward: return x.transpose(2, 3).flatten(2).transpose(1, 2);
    case ScanOrder::ColBackward: return x.transpose(2, 3).flatten(2).transpose(1, 2).flip({1});
  }
  throw Error("bad scan order");
}

Tensor unscan_sequence(const Tensor& seq, ScanOrder order, std::int64_t H, std::int64_t W) {
  const auto B = seq.size(0), C = seq.size(2);
  switch (order) {
    case ScanOrder::RowForward: return seq.transpose(1, 2).reshape({B, C, H, W});
    case ScanOrder::RowBackward: return seq.flip({1}).transpose(1, 2).reshape({B, C, H, W});
    case ScanOrder::ColForward: return seq.transpose(1, 2).reshape({B, C, W, H}).transpose(2, 3);
    case ScanOrder::ColBackward: return seq.flip({1}).transpose(1, 2).reshape({B, C, W, H}).transpose(2, 3);
  }
  throw Error("bad scan order");
}

Ss2dBlockImpl::Ss2dBlockImpl(Ss2dConfig cfg) : cfg_(cfg) {
  const auto c = cfg_.channels;
  norm_in = register_module("norm_in", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  in_proj = register_module("in_proj", torch::nn::Linear(c, 2 * c));
  dwconv = register_module("dwconv", nn::conv(c, c, 3, 1, c));
  for (int k = 0; k < 4; ++k) {
    scans.push_back(register_module("scan" + std::to_string(k), SelectiveScan1d(ScanConfig{c, cfg_.state_dim})));
  }
  norm_out = register_module("norm_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  out_proj = register_module("out_proj", torch::nn::Linear(c, c));
  nn::zero_init(*out_proj);
}

Tensor Ss2dBlockImpl::forward(const Tensor& x) {
  const auto H = x.size(2), W = x.size(3);
  auto xz = in_proj(norm_in(x.permute({0, 2, 3, 1}))).chunk(2, -1);
  auto feat = torch::silu(dwconv(xz[0].permute({0, 3, 1, 2})));
  Tensor merged;
  for (int k = 0; k < 4; ++k) {
    const auto order = static_cast<ScanOrder>(k);
    auto y = unscan_sequence(scans[k]->forward(scan_sequence(feat, order)), order, H, W);
    merged = merged.defined() ? merged + y : y;
  }
  auto out = norm_out(merged.permute({0, 2, 3, 1})) * torch::silu(xz[1]);
  return x + out_proj(out).permute({0, 3, 1, 2});
}

}  // namespace mdpg
