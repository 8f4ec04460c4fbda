#include <cmath>
#include <string>

#include "ssmprune/error.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

namespace {

struct ScanShape {
  std::int64_t steps, heads, head_dim, groups, state;
};

ScanShape check_scan_shapes(const Tensor& x, const Tensor& b, const Tensor& c,
                            const Tensor& dt_raw, const Tensor& a_log, const Tensor& d,
                            const Tensor& dt_bias, const Tensor& h0) {
  if (x.rank() != 3 || b.rank() != 3 || c.rank() != 3 || dt_raw.rank() != 2) {
    throw DimensionError("ssd_sequential: expected x[T,H,P], B[T,G,N], C[T,G,N], dt[T,H]");
  }
  ScanShape s{x.dim(0), x.dim(1), x.dim(2), b.dim(1), b.dim(2)};
  if (b.shape() != c.shape() || b.dim(0) != s.steps) {
    throw DimensionError("ssd_sequential: B " + shape_str(b.shape()) + " / C " +
                         shape_str(c.shape()) + " inconsistent with x " + shape_str(x.shape()));
  }
  if (dt_raw.shape() != Shape{s.steps, s.heads}) {
    throw DimensionError("ssd_sequential: dt " + shape_str(dt_raw.shape()));
  }
  for (const Tensor* t : {&a_log, &d, &dt_bias}) {
    if (t->shape() != Shape{s.heads}) {
      throw DimensionError("ssd_sequential: per-head parameter has shape " + shape_str(t->shape()));
    }
  }
  if (s.groups <= 0 || s.heads % s.groups != 0) {
    throw DimensionError("ssd_sequential: heads must be a multiple of groups");
  }
  if (h0.shape() != Shape{s.heads, s.head_dim, s.state}) {
    throw DimensionError("ssd_sequential: h0 " + shape_str(h0.shape()));
  }
  return s;
}

// Runs the scan and optionally keeps the state after every step
// (states[t] is the state after step t) for the backward pass.
SsdResult run_scan(const ScanShape& s, const Tensor& x, const Tensor& b, const Tensor& c,
                   const Tensor& dt_raw, const Tensor& a_log, const Tensor& d,
                   const Tensor& dt_bias, const Tensor& h0, std::vector<float>* history) {
  const auto [steps, heads, hd, groups, ns] = s;
  Tensor y({steps, heads, hd});
  Tensor state = h0;
  if (history) history->assign(static_cast<std::size_t>(steps * heads * hd * ns), 0.0F);
  float* st = state.data();
  for (std::int64_t t = 0; t < steps; ++t) {
    for (std::int64_t h = 0; h < heads; ++h) {
      const auto g = h * groups / heads;
      const float delta = softplus(dt_raw.at(t, h) + dt_bias[static_cast<std::size_t>(h)]);
      const float a = -std::exp(a_log[static_cast<std::size_t>(h)]);
      const float decay = std::exp(delta * a);
      const float dh = d[static_cast<std::size_t>(h)];
      const float* bt = b.data() + (t * groups + g) * ns;
      const float* ct = c.data() + (t * groups + g) * ns;
      bool finite = std::isfinite(decay) && std::isfinite(delta);
      for (std::int64_t p = 0; p < hd; ++p) {
        const float xv = x.data()[(t * heads + h) * hd + p];
        float* row = st + (h * hd + p) * ns;
        double acc = 0.0;
        for (std::int64_t n = 0; n < ns; ++n) {
          row[n] = decay * row[n] + delta * xv * bt[n];
          acc += static_cast<double>(row[n]) * ct[n];
        }
        const float out = static_cast<float>(acc) + dh * xv;
        finite = finite && std::isfinite(out);
        y.data()[(t * heads + h) * hd + p] = out;
      }
      if (!finite) {
        throw NumericError("ssd_sequential: non-finite state at step " + std::to_string(t));
      }
    }
    if (history) {
      std::copy(st, st + heads * hd * ns, history->data() + t * heads * hd * ns);
    }
  }
  return {std::move(y), std::move(state)};
}

}  // namespace

SsdResult ssd_sequential(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& dt_raw,
                         const Tensor& a_log, const Tensor& d, const Tensor& dt_bias,
                         const Tensor& h0) {
  const auto s = check_scan_shapes(x, b, c, dt_raw, a_log, d, dt_bias, h0);
  return run_scan(s, x, b, c, dt_raw, a_log, d, dt_bias, h0, nullptr);
}

namespace ad {

SsdVars ssd_sequential(Var x, Var b, Var c, Var dt_raw, Var a_log, Var d, Var dt_bias,
                       const Tensor& h0) {
  Tape& tape = *x.tape;
  for (const Var* v : {&b, &c, &dt_raw, &a_log, &d, &dt_bias}) {
    if (v->tape != &tape) throw ContractError("ssd_sequential: operands live on different tapes");
  }
  const auto s = check_scan_shapes(x.value(), b.value(), c.value(), dt_raw.value(), a_log.value(),
                                   d.value(), dt_bias.value(), h0);
  std::vector<float> history;
  SsdResult fwd = run_scan(s, x.value(), b.value(), c.value(), dt_raw.value(), a_log.value(),
                           d.value(), dt_bias.value(), h0, &history);
  Var y = tape.record(
      std::move(fwd.y), {x.id, b.id, c.id, dt_raw.id, a_log.id, d.id, dt_bias.id},
      [=, history = std::move(history)](const Tensor& gy, Tape& t) {
        const auto [steps, heads, hd, groups, ns] = s;
        const Tensor& xv = t.value(x.id);
        const Tensor& bv = t.value(b.id);
        const Tensor& cv = t.value(c.id);
        const Tensor& dtv = t.value(dt_raw.id);
        const Tensor& alv = t.value(a_log.id);
        const Tensor& dv = t.value(d.id);
        const Tensor& dbv = t.value(dt_bias.id);
        Tensor gx(xv.shape()), gb(bv.shape()), gc(cv.shape()), gdt(dtv.shape());
        Tensor gal(alv.shape()), gd(dv.shape()), gdb(dbv.shape());
        const auto block = hd * ns;
        std::vector<double> ds(static_cast<std::size_t>(block));
        for (std::int64_t h = 0; h < heads; ++h) {
          const auto hu = static_cast<std::size_t>(h);
          const auto g = h * groups / heads;
          const float a = -std::exp(alv[hu]);
          std::fill(ds.begin(), ds.end(), 0.0);
          double g_a = 0.0;
          double g_d = 0.0;
          double g_bias = 0.0;
          for (std::int64_t step = steps; step-- > 0;) {
            const float* cur = history.data() + (step * heads + h) * block;
            const float* prev =
                step > 0 ? history.data() + ((step - 1) * heads + h) * block : h0.data() + h * block;
            const float v = dtv.at(step, h) + dbv[hu];
            const float delta = ssmprune::softplus(v);
            const float decay = std::exp(delta * a);
            const float* bt = bv.data() + (step * groups + g) * ns;
            const float* ct = cv.data() + (step * groups + g) * ns;
            float* gbt = gb.data() + (step * groups + g) * ns;
            float* gct = gc.data() + (step * groups + g) * ns;
            const float* xt = xv.data() + (step * heads + h) * hd;
            float* gxt = gx.data() + (step * heads + h) * hd;
            const float* gyt = gy.data() + (step * heads + h) * hd;
            // Readout y = S C + D x.
            for (std::int64_t p = 0; p < hd; ++p) {
              g_d += static_cast<double>(gyt[p]) * xt[p];
              gxt[p] += dv[hu] * gyt[p];
              for (std::int64_t n = 0; n < ns; ++n) {
                ds[static_cast<std::size_t>(p * ns + n)] += static_cast<double>(gyt[p]) * ct[n];
                gct[n] += cur[p * ns + n] * gyt[p];
              }
            }
            // Update S = decay * S_prev + delta * x (outer) B.
            double g_decay = 0.0;
            double g_delta = 0.0;
            for (std::int64_t p = 0; p < hd; ++p) {
              double gx_acc = 0.0;
              for (std::int64_t n = 0; n < ns; ++n) {
                const double dsv = ds[static_cast<std::size_t>(p * ns + n)];
                g_decay += dsv * prev[p * ns + n];
                g_delta += dsv * xt[p] * bt[n];
                gx_acc += dsv * bt[n];
                gbt[n] += static_cast<float>(delta * dsv * xt[p]);
              }
              gxt[p] += static_cast<float>(delta * gx_acc);
            }
            g_delta += g_decay * decay * a;
            g_a += g_decay * decay * delta;
            const double gv = g_delta * (v > 20.0F ? 1.0 : ssmprune::sigmoid(v));
            gdt.at(step, h) = static_cast<float>(gv);
            g_bias += gv;
            for (auto& e : ds) e *= decay;
          }
          gal[hu] = static_cast<float>(g_a * a);
          gd[hu] = static_cast<float>(g_d);
          gdb[hu] = static_cast<float>(g_bias);
        }
        t.accumulate(x.id, gx);
        t.accumulate(b.id, gb);
        t.accumulate(c.id, gc);
        t.accumulate(dt_raw.id, gdt);
        t.accumulate(a_log.id, gal);
        t.accumulate(d.id, gd);
        t.accumulate(dt_bias.id, gdb);
      });
  return {y, std::move(fwd.state)};
}

}  // namespace ad

}  // namespace ssmprune
