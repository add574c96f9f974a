//! Forward and backward passes, written as plain loops over the flat
//! parameter vector. Single-threaded with fixed accumulation order: the
//! codec relies on bit-identical scores at compress and decompress time.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::Coord;
use crate::model::{Model, LN_EPS};

/// exp(-x^2/2)/sqrt(2*pi), the standard normal density at x.
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Numerically safe softmax (max-subtracted), allocating the output.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Exact GELU: x * Phi(x).
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx GELU = Phi(x) + x * phi(x).
fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    phi_cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// y[rows x n] = x[rows x m] . w[m x n] + b, row-major.
fn affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, m: usize, n: usize, y: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * m..(r + 1) * m];
        let yr = &mut y[r * n..(r + 1) * n];
        yr.copy_from_slice(b);
        for (i, &xv) in xr.iter().enumerate() {
            let wrow = &w[i * n..(i + 1) * n];
            for (yj, &wj) in yr.iter_mut().zip(wrow) {
                *yj += xv * wj;
            }
        }
    }
}

/// Accumulates dx += dy . w^T, dw += x^T . dy, db += column sums of dy.
fn affine_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    m: usize,
    n: usize,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * n..(r + 1) * n];
        let xr = &x[r * m..(r + 1) * m];
        for (j, &dv) in dyr.iter().enumerate() {
            db[j] += dv;
        }
        for i in 0..m {
            let wrow = &w[i * n..(i + 1) * n];
            let dwrow = &mut dw[i * n..(i + 1) * n];
            let xv = xr[i];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dyr[j] * wrow[j];
                dwrow[j] += xv * dyr[j];
            }
            if let Some(dx) = dx.as_deref_mut() {
                dx[r * m + i] += acc;
            }
        }
    }
}

/// LayerNorm over one row; returns (mean, rstd) and writes gain*xhat+shift.
fn layernorm_row(x: &[f64], gain: &[f64], shift: &[f64], y: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d;
    let rstd = 1.0 / libm::sqrt(var + LN_EPS);
    for i in 0..x.len() {
        y[i] = gain[i] * ((x[i] - mean) * rstd) + shift[i];
    }
    (mean, rstd)
}

/// Backward for one LayerNorm row. Accumulates dgain/dshift and dx.
#[allow(clippy::too_many_arguments)]
fn layernorm_row_backward(
    x: &[f64],
    mean: f64,
    rstd: f64,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
) {
    let n = x.len();
    let d = n as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dshift[i] += dy[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let m1 = sum_dxhat / d;
    let m2 = sum_dxhat_xhat / d;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dx[i] += rstd * (dxhat - m1 - xhat * m2);
    }
}

/// Activations recorded by a traced forward pass, enough to run backward
/// without recomputation.
pub(crate) struct Trace {
    /// hs[l] is the C x d input to layer l; hs[layers] is the final state.
    pub(crate) hs: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
    lnf_mean: f64,
    lnf_rstd: f64,
    /// Final-position normalized state fed to the output head.
    z: Vec<f64>,
}

struct LayerTrace {
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    /// LN1 output, C x d.
    a: Vec<f64>,
    /// Packed q|k|v rows, C x 3d.
    qkv: Vec<f64>,
    /// Attention weights, heads x C x C (row i zero beyond column i).
    att: Vec<f64>,
    /// Concatenated head outputs before the output projection, C x d.
    mix: Vec<f64>,
    /// State after the attention residual, C x d.
    h_mid: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    /// LN2 output, C x d.
    m: Vec<f64>,
    /// FFN pre-activation, C x f.
    u: Vec<f64>,
    /// FFN post-GELU, C x f.
    g: Vec<f64>,
}

/// Full forward pass to logits. `trace` captures activations for backward.
pub(crate) fn forward_logits(
    model: &Model,
    tokens: &[u32],
    coords: &[Coord],
    mut trace: Option<&mut Trace>,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    let c = cfg.context as usize;
    let d = cfg.hidden as usize;
    let heads = cfg.heads as usize;
    let hd = d / heads;
    let f = super::FFN_MULT * d;
    let v = cfg.vocab as usize;
    if tokens.len() != c {
        return Err(Error::BadContextLen { expected: c, actual: tokens.len() });
    }
    if coords.len() != c + 1 {
        return Err(Error::BadContextCoords);
    }
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab });
        }
    }
    for co in coords {
        if co.x >= cfg.max_rows || co.y >= cfg.max_cols {
            return Err(Error::CoordOutOfEmbed {
                x: co.x,
                y: co.y,
                max_m: cfg.max_rows,
                max_n: cfg.max_cols,
            });
        }
    }

    let p = model.params();
    let off = model.offsets();
    let scale = 1.0 / libm::sqrt(hd as f64);

    // Embedding sum; the final slot also receives the target coordinates.
    let mut h = alloc::vec![0.0f64; c * d];
    for i in 0..c {
        let row = &mut h[i * d..(i + 1) * d];
        add_slice(row, &p[off.tok + tokens[i] as usize * d..][..d]);
        add_slice(row, &p[off.row + coords[i].x as usize * d..][..d]);
        add_slice(row, &p[off.col + coords[i].y as usize * d..][..d]);
        let ti = (coords[i].t % cfg.max_time) as usize;
        add_slice(row, &p[off.time + ti * d..][..d]);
    }
    let tgt = coords[c];
    {
        let last = &mut h[(c - 1) * d..c * d];
        add_slice(last, &p[off.row + tgt.x as usize * d..][..d]);
        add_slice(last, &p[off.col + tgt.y as usize * d..][..d]);
        let ti = (tgt.t % cfg.max_time) as usize;
        add_slice(last, &p[off.time + ti * d..][..d]);
    }
    if let Some(t) = trace.as_deref_mut() {
        t.hs.clear();
        t.layers.clear();
        t.hs.push(h.clone());
    }

    let mut a = alloc::vec![0.0f64; c * d];
    let mut qkv = alloc::vec![0.0f64; c * 3 * d];
    let mut att = alloc::vec![0.0f64; heads * c * c];
    let mut mix = alloc::vec![0.0f64; c * d];
    let mut scratch_d = alloc::vec![0.0f64; c * d];
    let mut u = alloc::vec![0.0f64; c * f];
    let mut g = alloc::vec![0.0f64; c * f];

    for lo in &off.layers {
        // Attention block with pre-LN.
        let mut ln1_mean = alloc::vec![0.0f64; c];
        let mut ln1_rstd = alloc::vec![0.0f64; c];
        for i in 0..c {
            let (mean, rstd) = layernorm_row(
                &h[i * d..(i + 1) * d],
                &p[lo.ln1_g..lo.ln1_g + d],
                &p[lo.ln1_b..lo.ln1_b + d],
                &mut a[i * d..(i + 1) * d],
            );
            ln1_mean[i] = mean;
            ln1_rstd[i] = rstd;
        }
        affine(&a, &p[lo.w_qkv..lo.w_qkv + d * 3 * d], &p[lo.b_qkv..lo.b_qkv + 3 * d], c, d, 3 * d, &mut qkv);
        // `a` is reused for the LN2 output below, so snapshot it now.
        let a_snapshot = trace.is_some().then(|| a.clone());
        att.fill(0.0);
        for hix in 0..heads {
            let att_h = &mut att[hix * c * c..(hix + 1) * c * c];
            for i in 0..c {
                let q = &qkv[i * 3 * d + hix * hd..][..hd];
                let row = &mut att_h[i * c..i * c + i + 1];
                for (j, slot) in row.iter_mut().enumerate() {
                    let k = &qkv[j * 3 * d + d + hix * hd..][..hd];
                    let mut s = 0.0;
                    for (qa, ka) in q.iter().zip(k) {
                        s += qa * ka;
                    }
                    *slot = s * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..c {
                let out = &mut mix[i * d + hix * hd..][..hd];
                out.fill(0.0);
                for j in 0..=i {
                    let w = att_h[i * c + j];
                    let vrow = &qkv[j * 3 * d + 2 * d + hix * hd..][..hd];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
        }
        affine(&mix, &p[lo.w_o..lo.w_o + d * d], &p[lo.b_o..lo.b_o + d], c, d, d, &mut scratch_d);
        add_slice(&mut h, &scratch_d);
        let h_mid_snapshot = trace.is_some().then(|| h.clone());

        // Feed-forward block with pre-LN; `a` is reused for the LN2 output.
        let mut ln2_mean = alloc::vec![0.0f64; c];
        let mut ln2_rstd = alloc::vec![0.0f64; c];
        let m = &mut a;
        for i in 0..c {
            let (mean, rstd) = layernorm_row(
                &h[i * d..(i + 1) * d],
                &p[lo.ln2_g..lo.ln2_g + d],
                &p[lo.ln2_b..lo.ln2_b + d],
                &mut m[i * d..(i + 1) * d],
            );
            ln2_mean[i] = mean;
            ln2_rstd[i] = rstd;
        }
        affine(m, &p[lo.w_fc1..lo.w_fc1 + d * f], &p[lo.b_fc1..lo.b_fc1 + f], c, d, f, &mut u);
        for (gv, &uv) in g.iter_mut().zip(u.iter()) {
            *gv = gelu(uv);
        }
        affine(&g, &p[lo.w_fc2..lo.w_fc2 + f * d], &p[lo.b_fc2..lo.b_fc2 + d], c, f, d, &mut scratch_d);
        add_slice(&mut h, &scratch_d);

        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(LayerTrace {
                ln1_mean,
                ln1_rstd,
                a: a_snapshot.expect("trace on"),
                qkv: qkv.clone(),
                att: att.clone(),
                mix: mix.clone(),
                h_mid: h_mid_snapshot.expect("trace on"),
                ln2_mean,
                ln2_rstd,
                m: a.clone(),
                u: u.clone(),
                g: g.clone(),
            });
            t.hs.push(h.clone());
        }
    }

    // Final norm at the last position, then the output head.
    let last = &h[(c - 1) * d..c * d];
    let mut z = alloc::vec![0.0f64; d];
    let (lnf_mean, lnf_rstd) = layernorm_row(
        last,
        &p[off.lnf_g..off.lnf_g + d],
        &p[off.lnf_b..off.lnf_b + d],
        &mut z,
    );
    let mut logits = alloc::vec![0.0f64; v];
    affine(&z, &p[off.head_w..off.head_w + d * v], &p[off.head_b..off.head_b + v], 1, d, v, &mut logits);

    if let Some(t) = trace {
        t.lnf_mean = lnf_mean;
        t.lnf_rstd = lnf_rstd;
        t.z = z;
    }
    Ok(logits)
}

impl Trace {
    pub(crate) fn new() -> Trace {
        Trace {
            hs: Vec::new(),
            layers: Vec::new(),
            lnf_mean: 0.0,
            lnf_rstd: 0.0,
            z: Vec::new(),
        }
    }
}

/// Backward pass: accumulates parameter gradients into `grads` (same
/// layout as the parameter vector) given the loss gradient at the logits.
pub(crate) fn backward(
    model: &Model,
    tokens: &[u32],
    coords: &[Coord],
    trace: &Trace,
    dlogits: &[f64],
    grads: &mut [f64],
) {
    let cfg = model.config();
    let c = cfg.context as usize;
    let d = cfg.hidden as usize;
    let heads = cfg.heads as usize;
    let hd = d / heads;
    let f = super::FFN_MULT * d;
    let v = cfg.vocab as usize;
    let p = model.params();
    let off = model.offsets();
    let scale = 1.0 / libm::sqrt(hd as f64);
    debug_assert_eq!(grads.len(), p.len());
    debug_assert_eq!(dlogits.len(), v);

    // Head and final norm.
    let mut dz = alloc::vec![0.0f64; d];
    {
        let (dw, db) = wb(grads, off.head_w, d * v, v);
        affine_backward(&trace.z, &p[off.head_w..off.head_w + d * v], dlogits, 1, d, v, Some(&mut dz), dw, db);
    }
    let mut dh = alloc::vec![0.0f64; c * d];
    {
        let h_last = &trace.hs[off.layers.len()][(c - 1) * d..c * d];
        // Gain and shift are adjacent in the layout, so one split borrows
        // both gradient slices.
        let (dg, rest) = grads[off.lnf_g..].split_at_mut(d);
        let db = &mut rest[..d];
        layernorm_row_backward(
            h_last,
            trace.lnf_mean,
            trace.lnf_rstd,
            &p[off.lnf_g..off.lnf_g + d],
            &dz,
            &mut dh[(c - 1) * d..c * d],
            dg,
            db,
        );
    }

    let mut da = alloc::vec![0.0f64; c * d];
    let mut dqkv = alloc::vec![0.0f64; c * 3 * d];
    let mut dmix = alloc::vec![0.0f64; c * d];
    let mut du = alloc::vec![0.0f64; c * f];
    let mut dg_act = alloc::vec![0.0f64; c * f];
    let mut dm = alloc::vec![0.0f64; c * d];
    let mut dp_row = alloc::vec![0.0f64; c];

    for (l, lo) in off.layers.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let h_in = &trace.hs[l];

        // FFN block backward. dh flows through the residual unchanged and
        // additionally through LN2 -> fc1 -> gelu -> fc2.
        dg_act.fill(0.0);
        {
            let (dw, db) = wb(grads, lo.w_fc2, f * d, d);
            affine_backward(&lt.g, &p[lo.w_fc2..lo.w_fc2 + f * d], &dh, c, f, d, Some(&mut dg_act), dw, db);
        }
        for i in 0..c * f {
            du[i] = dg_act[i] * gelu_grad(lt.u[i]);
        }
        dm.fill(0.0);
        {
            let (dw, db) = wb(grads, lo.w_fc1, d * f, f);
            affine_backward(&lt.m, &p[lo.w_fc1..lo.w_fc1 + d * f], &du, c, d, f, Some(&mut dm), dw, db);
        }
        for i in 0..c {
            let (dg, rest) = grads[lo.ln2_g..].split_at_mut(d);
            let db = &mut rest[..d];
            layernorm_row_backward(
                &lt.h_mid[i * d..(i + 1) * d],
                lt.ln2_mean[i],
                lt.ln2_rstd[i],
                &p[lo.ln2_g..lo.ln2_g + d],
                &dm[i * d..(i + 1) * d],
                &mut dh[i * d..(i + 1) * d],
                dg,
                db,
            );
        }

        // Attention block backward; dh is now the gradient at h_mid.
        dmix.fill(0.0);
        {
            let (dw, db) = wb(grads, lo.w_o, d * d, d);
            affine_backward(&lt.mix, &p[lo.w_o..lo.w_o + d * d], &dh, c, d, d, Some(&mut dmix), dw, db);
        }
        dqkv.fill(0.0);
        for hix in 0..heads {
            let att_h = &lt.att[hix * c * c..(hix + 1) * c * c];
            for i in 0..c {
                let dmix_i = &dmix[i * d + hix * hd..][..hd];
                // dP and softmax jacobian, row i attends to 0..=i.
                let mut dot = 0.0;
                for j in 0..=i {
                    let vrow = &lt.qkv[j * 3 * d + 2 * d + hix * hd..][..hd];
                    let mut s = 0.0;
                    for (dm_, vv) in dmix_i.iter().zip(vrow) {
                        s += dm_ * vv;
                    }
                    dp_row[j] = s;
                    dot += s * att_h[i * c + j];
                    // dv_j += P_ij * dmix_i
                    let w = att_h[i * c + j];
                    let dv = &mut dqkv[j * 3 * d + 2 * d + hix * hd..][..hd];
                    for (dvv, dm_) in dv.iter_mut().zip(dmix_i) {
                        *dvv += w * dm_;
                    }
                }
                for j in 0..=i {
                    let ds = att_h[i * c + j] * (dp_row[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qs, ks) = (i * 3 * d + hix * hd, j * 3 * d + d + hix * hd);
                    for t in 0..hd {
                        dqkv[qs + t] += ds * lt.qkv[ks + t];
                        dqkv[ks + t] += ds * lt.qkv[qs + t];
                    }
                }
            }
        }
        da.fill(0.0);
        {
            let (dw, db) = wb(grads, lo.w_qkv, d * 3 * d, 3 * d);
            affine_backward(&lt.a, &p[lo.w_qkv..lo.w_qkv + d * 3 * d], &dqkv, c, d, 3 * d, Some(&mut da), dw, db);
        }
        for i in 0..c {
            let (dg, rest) = grads[lo.ln1_g..].split_at_mut(d);
            let db = &mut rest[..d];
            layernorm_row_backward(
                &h_in[i * d..(i + 1) * d],
                lt.ln1_mean[i],
                lt.ln1_rstd[i],
                &p[lo.ln1_g..lo.ln1_g + d],
                &da[i * d..(i + 1) * d],
                &mut dh[i * d..(i + 1) * d],
                dg,
                db,
            );
        }
    }

    // Embedding scatter.
    for i in 0..c {
        let dhr = &dh[i * d..(i + 1) * d];
        add_at(grads, off.tok + tokens[i] as usize * d, dhr);
        add_at(grads, off.row + coords[i].x as usize * d, dhr);
        add_at(grads, off.col + coords[i].y as usize * d, dhr);
        add_at(grads, off.time + (coords[i].t % cfg.max_time) as usize * d, dhr);
    }
    let tgt = coords[c];
    let dhr = &dh[(c - 1) * d..c * d];
    add_at(grads, off.row + tgt.x as usize * d, dhr);
    add_at(grads, off.col + tgt.y as usize * d, dhr);
    add_at(grads, off.time + (tgt.t % cfg.max_time) as usize * d, dhr);
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Disjoint weight/bias gradient slices. Every bias immediately follows
/// its weight matrix in the parameter layout, so one split covers both.
fn wb(grads: &mut [f64], w_off: usize, w_len: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    grads[w_off..w_off + w_len + b_len].split_at_mut(w_len)
}

fn add_at(buf: &mut [f64], offset: usize, src: &[f64]) {
    add_slice(&mut buf[offset..offset + src.len()], src);
}

/// The two loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// -log p[target].
    pub ce: f64,
    /// 0.5 * (expected midpoint - target midpoint)^2, unweighted.
    pub mse: f64,
    /// ce + alpha * mse.
    pub total: f64,
}

/// Hybrid loss over a probability vector: cross-entropy on the target
/// token plus alpha times half the squared midpoint error, where the
/// predicted midpoint is the probability-weighted expectation.
pub fn hybrid_loss(probs: &[f64], target: u32, midpoints: &[f64], alpha: f64) -> Result<LossParts> {
    if midpoints.len() != probs.len() {
        return Err(Error::Internal("midpoint table does not match vocab"));
    }
    if target as usize >= probs.len() {
        return Err(Error::TokenOutOfRange { token: target, vocab: probs.len() as u32 });
    }
    let (ce, mse, _) = loss_terms(probs, target, midpoints);
    Ok(LossParts { ce, mse, total: ce + alpha * mse })
}

/// Shared loss arithmetic; returns (ce, mse, r_pred).
fn loss_terms(probs: &[f64], target: u32, midpoints: &[f64]) -> (f64, f64, f64) {
    let ce = -libm::log(probs[target as usize]);
    let mut r_pred = 0.0;
    for (pv, mv) in probs.iter().zip(midpoints) {
        r_pred += pv * mv;
    }
    let e = r_pred - midpoints[target as usize];
    (ce, 0.5 * e * e, r_pred)
}

/// Loss and its gradient at the logits:
/// d/dz_k = (p_k - [k == target]) + alpha * e * p_k * (m_k - r_pred).
pub(crate) fn loss_and_dlogits(
    probs: &[f64],
    target: u32,
    midpoints: &[f64],
    alpha: f64,
    dlogits: &mut [f64],
) -> LossParts {
    let (ce, mse, r_pred) = loss_terms(probs, target, midpoints);
    let e = r_pred - midpoints[target as usize];
    for (k, slot) in dlogits.iter_mut().enumerate() {
        let pk = probs[k];
        let ind = if k == target as usize { 1.0 } else { 0.0 };
        *slot = (pk - ind) + alpha * e * pk * (midpoints[k] - r_pred);
    }
    LossParts { ce, mse, total: ce + alpha * mse }
}
