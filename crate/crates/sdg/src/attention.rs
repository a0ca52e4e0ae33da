//! Multi-head cross-attention kernels with the three fusion modes: a single
//! key/value sequence, a shared attention map over multiple value sequences,
//! and per-sequence attention maps paired with their values.
//!
//! All reductions run in a fixed order, so outputs are bit-reproducible.

use crate::error::{Result, SdgError};
use crate::mat::{Mat, Tensor3};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub kv_len: usize,
    pub spatial_h: usize,
    pub spatial_w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Baseline,
    MultiValue,
    MultiKey,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "base" | "baseline" => Some(FusionMode::Baseline),
            "mv" | "multivalue" => Some(FusionMode::MultiValue),
            "mk" | "multikey" => Some(FusionMode::MultiKey),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::MultiValue => "multivalue",
            FusionMode::MultiKey => "multikey",
        }
    }
}

/// How the per-sequence attention maps pair with value sequences in the
/// multi-key mode. The printed equation indexes a fixed value tensor; pairing
/// each map with its own values is the reading used by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eq5Pairing {
    Paired,
    FixedLast,
}

#[derive(Debug, Clone)]
pub struct FusionOptions<S> {
    /// Weight per value sequence, prompt first; `None` means uniform
    /// `1/(k+1)`.
    pub concept_weights: Option<Vec<S>>,
    pub eq5_pairing: Eq5Pairing,
}

impl<S> Default for FusionOptions<S> {
    fn default() -> Self {
        FusionOptions { concept_weights: None, eq5_pairing: Eq5Pairing::Paired }
    }
}

/// Bias-free projection weights for one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<S> {
    /// `model_dim x (heads * head_dim)`
    pub w_q: Mat<S>,
    /// `ctx_dim x (heads * head_dim)`
    pub w_k: Mat<S>,
    /// `ctx_dim x (heads * head_dim)`
    pub w_v: Mat<S>,
    /// `(heads * head_dim) x model_dim`
    pub w_o: Mat<S>,
    pub num_heads: usize,
}

impl<S: Scalar> ProjectionWeights<S> {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols() / self.num_heads
    }
}

/// `(rows x heads*d)` matrix viewed per head as `(heads, rows, d)`.
pub fn split_heads<S: Scalar>(m: &Mat<S>, num_heads: usize) -> Tensor3<S> {
    assert_eq!(m.cols() % num_heads, 0);
    let d = m.cols() / num_heads;
    let mut out = Tensor3::zeros(num_heads, m.rows(), d);
    for h in 0..num_heads {
        for r in 0..m.rows() {
            for c in 0..d {
                *out.at_mut(h, r, c) = m.at(r, h * d + c);
            }
        }
    }
    out
}

pub fn merge_heads<S: Scalar>(t: &Tensor3<S>) -> Mat<S> {
    let (n, rows, d) = t.dims();
    let mut out = Mat::zeros(rows, n * d);
    for h in 0..n {
        for r in 0..rows {
            for c in 0..d {
                *out.at_mut(r, h * d + c) = t.at(h, r, c);
            }
        }
    }
    out
}

/// Queries from the feature map and keys/values from each context sequence.
pub fn project<S: Scalar>(
    x: &Mat<S>,
    contexts: &[&Mat<S>],
    weights: &ProjectionWeights<S>,
) -> Result<(Tensor3<S>, Vec<Tensor3<S>>, Vec<Tensor3<S>>)> {
    if x.cols() != weights.w_q.rows() {
        return Err(SdgError::ShapeMismatch(format!(
            "query input has {} features, w_q expects {}",
            x.cols(),
            weights.w_q.rows()
        )));
    }
    let q = split_heads(&x.matmul(&weights.w_q), weights.num_heads);
    let mut ks = Vec::with_capacity(contexts.len());
    let mut vs = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        if ctx.cols() != weights.w_k.rows() {
            return Err(SdgError::ShapeMismatch(format!(
                "context has {} features, w_k expects {}",
                ctx.cols(),
                weights.w_k.rows()
            )));
        }
        ks.push(split_heads(&ctx.matmul(&weights.w_k), weights.num_heads));
        vs.push(split_heads(&ctx.matmul(&weights.w_v), weights.num_heads));
    }
    Ok((q, ks, vs))
}

/// Row-wise softmax of `Q K^T / sqrt(d)` per head; every row sums to one.
pub fn attention_maps<S: Scalar>(q: &Tensor3<S>, k: &Tensor3<S>) -> Tensor3<S> {
    let (n, rows, d) = q.dims();
    let (nk, l, dk) = k.dims();
    assert_eq!(n, nk, "head count mismatch");
    assert_eq!(d, dk, "head dim mismatch");
    let scale = S::one() / S::of(d as f64).sqrt();
    let mut m = Tensor3::zeros(n, rows, l);
    for h in 0..n {
        for r in 0..rows {
            let mut max = S::neg_infinity();
            for j in 0..l {
                let mut dot = S::zero();
                for c in 0..d {
                    dot += q.at(h, r, c) * k.at(h, j, c);
                }
                let s = dot * scale;
                *m.at_mut(h, r, j) = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = S::zero();
            for j in 0..l {
                let e = (m.at(h, r, j) - max).exp();
                *m.at_mut(h, r, j) = e;
                sum += e;
            }
            for j in 0..l {
                *m.at_mut(h, r, j) = m.at(h, r, j) / sum;
            }
        }
    }
    m
}

/// `M V` per head.
pub fn apply_maps<S: Scalar>(m: &Tensor3<S>, v: &Tensor3<S>) -> Tensor3<S> {
    let (n, rows, l) = m.dims();
    let (nv, lv, d) = v.dims();
    assert_eq!(n, nv, "head count mismatch");
    assert_eq!(l, lv, "key/value length mismatch");
    let mut out = Tensor3::zeros(n, rows, d);
    for h in 0..n {
        for r in 0..rows {
            for j in 0..l {
                let w = m.at(h, r, j);
                for c in 0..d {
                    *out.at_mut(h, r, c) += w * v.at(h, j, c);
                }
            }
        }
    }
    out
}

/// Fused cross-attention output plus the attention maps that produced it
/// (one per value sequence in multi-key mode, otherwise a single shared map).
#[derive(Debug, Clone)]
pub struct FuseOutput<S> {
    pub out: Mat<S>,
    pub maps: Vec<Tensor3<S>>,
}

/// Cross-attention with structured fusion. `q` holds per-head queries,
/// `prompt_ctx` is the full-prompt context matrix and `spans` the re-aligned
/// span contexts in their fixed summation order (prompt term first, then
/// spans). With no spans every mode reduces to the baseline path bitwise.
pub fn fuse_recorded<S: Scalar>(
    q: &Tensor3<S>,
    prompt_ctx: &Mat<S>,
    spans: &[Mat<S>],
    mode: FusionMode,
    weights: &ProjectionWeights<S>,
    opts: &FusionOptions<S>,
) -> Result<FuseOutput<S>> {
    let n = weights.num_heads;
    let k_p = split_heads(&prompt_ctx.matmul(&weights.w_k), n);
    let v_p = split_heads(&prompt_ctx.matmul(&weights.w_v), n);
    let (_, _, d) = q.dims();
    if d != weights.head_dim() {
        return Err(SdgError::ShapeMismatch(format!(
            "query head dim {} does not match weights head dim {}",
            d,
            weights.head_dim()
        )));
    }

    if spans.is_empty() || mode == FusionMode::Baseline {
        let m = attention_maps(q, &k_p);
        let o = apply_maps(&m, &v_p);
        let out = merge_heads(&o).matmul(&weights.w_o);
        return Ok(FuseOutput { out, maps: vec![m] });
    }

    let k = spans.len();
    let lambdas: Vec<S> = match &opts.concept_weights {
        Some(w) => {
            if w.len() != k + 1 {
                return Err(SdgError::ShapeMismatch(format!(
                    "expected {} concept weights, got {}",
                    k + 1,
                    w.len()
                )));
            }
            w.clone()
        }
        None => vec![S::one() / S::of((k + 1) as f64); k + 1],
    };

    let span_vs: Vec<Tensor3<S>> = spans
        .iter()
        .map(|ctx| split_heads(&ctx.matmul(&weights.w_v), n))
        .collect();

    match mode {
        FusionMode::Baseline => unreachable!(),
        FusionMode::MultiValue => {
            // One map from the prompt keys, applied to every value sequence.
            let m = attention_maps(q, &k_p);
            let mut acc = apply_maps(&m, &v_p);
            for x in acc.data_mut() {
                *x = *x * lambdas[0];
            }
            for (i, v_i) in span_vs.iter().enumerate() {
                let term = apply_maps(&m, v_i);
                for (a, &t) in acc.data_mut().iter_mut().zip(term.data()) {
                    *a += lambdas[i + 1] * t;
                }
            }
            let out = merge_heads(&acc).matmul(&weights.w_o);
            Ok(FuseOutput { out, maps: vec![m] })
        }
        FusionMode::MultiKey => {
            let span_ks: Vec<Tensor3<S>> = spans
                .iter()
                .map(|ctx| split_heads(&ctx.matmul(&weights.w_k), n))
                .collect();
            let mut maps = Vec::with_capacity(k + 1);
            maps.push(attention_maps(q, &k_p));
            for k_i in &span_ks {
                maps.push(attention_maps(q, k_i));
            }
            let value_for = |i: usize| -> &Tensor3<S> {
                match opts.eq5_pairing {
                    Eq5Pairing::Paired => {
                        if i == 0 {
                            &v_p
                        } else {
                            &span_vs[i - 1]
                        }
                    }
                    Eq5Pairing::FixedLast => span_vs.last().unwrap_or(&v_p),
                }
            };
            let mut acc = apply_maps(&maps[0], value_for(0));
            for x in acc.data_mut() {
                *x = *x * lambdas[0];
            }
            for i in 1..=k {
                let term = apply_maps(&maps[i], value_for(i));
                for (a, &t) in acc.data_mut().iter_mut().zip(term.data()) {
                    *a += lambdas[i] * t;
                }
            }
            let out = merge_heads(&acc).matmul(&weights.w_o);
            Ok(FuseOutput { out, maps })
        }
    }
}

/// [`fuse_recorded`] without keeping the attention maps.
pub fn fuse<S: Scalar>(
    q: &Tensor3<S>,
    prompt_ctx: &Mat<S>,
    spans: &[Mat<S>],
    mode: FusionMode,
    weights: &ProjectionWeights<S>,
    opts: &FusionOptions<S>,
) -> Result<Mat<S>> {
    Ok(fuse_recorded(q, prompt_ctx, spans, mode, weights, opts)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_weights(dim: usize) -> ProjectionWeights<f64> {
        let eye = Mat::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 });
        ProjectionWeights {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            num_heads: 1,
        }
    }

    fn random_weights(
        rng: &mut ChaCha8Rng,
        model_dim: usize,
        ctx_dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> ProjectionWeights<f64> {
        let mut rnd = |r: usize, c: usize| {
            Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
        };
        let inner = heads * head_dim;
        ProjectionWeights {
            w_q: rnd(model_dim, inner),
            w_k: rnd(ctx_dim, inner),
            w_v: rnd(ctx_dim, inner),
            w_o: rnd(inner, model_dim),
            num_heads: heads,
        }
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn project_identity_single_head() {
        let w = identity_weights(3);
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (q, ks, vs) = project(&x, &[], &w).unwrap();
        assert!(ks.is_empty() && vs.is_empty());
        assert_eq!(q.dims(), (1, 2, 3));
        assert_eq!(q.slice0(0), x.data());
    }

    #[test]
    fn project_two_contexts() {
        let w = identity_weights(3);
        let x = Mat::zeros(2, 3);
        let c1 = Mat::zeros(4, 3);
        let c2 = Mat::zeros(5, 3);
        let (_, ks, vs) = project(&x, &[&c1, &c2], &w).unwrap();
        assert_eq!(ks.len(), 2);
        assert_eq!(vs.len(), 2);
        assert_eq!(ks[1].dims(), (1, 5, 3));
    }

    #[test]
    fn project_zero_input_gives_zero_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&mut rng, 4, 4, 2, 2);
        let x = Mat::zeros(3, 4);
        let (q, _, _) = project(&x, &[], &w).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maps_one_hot_in_softmax_limit() {
        // Orthonormal keys; query is a large multiple of key row 1.
        let k = Tensor3::from_vec(1, 3, 3, vec![
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
        ]);
        let q = Tensor3::from_vec(1, 1, 3, vec![0.0, 100.0, 0.0]);
        let m = attention_maps(&q, &k);
        assert!(m.at(0, 0, 1) > 0.999999);
        assert!(m.at(0, 0, 0) < 1e-6);
    }

    #[test]
    fn maps_uniform_for_zero_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Tensor3::from_vec(1, 4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q = Tensor3::zeros(1, 2, 2);
        let m = attention_maps(&q, &k);
        for r in 0..2 {
            for j in 0..4 {
                let diff: f64 = m.at(0, r, j) - 0.25;
                assert!(diff.abs() < 1e-12);
            }
        }
    }

    /// Independent scalar brute-force softmax, kept free of the kernel path.
    fn oracle_maps(q: &Tensor3<f64>, k: &Tensor3<f64>) -> Tensor3<f64> {
        let (n, rows, d) = q.dims();
        let (_, l, _) = k.dims();
        let mut out = Tensor3::zeros(n, rows, l);
        for h in 0..n {
            for r in 0..rows {
                let mut exps = vec![0.0; l];
                for (j, e) in exps.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q.at(h, r, c) * k.at(h, j, c);
                    }
                    *e = (s / (d as f64).sqrt()).exp();
                }
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    *out.at_mut(h, r, j) = e / total;
                }
            }
        }
        out
    }

    #[test]
    fn maps_match_scalar_oracle_on_integer_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-2i32..=2) as f64).collect()
        };
        for _ in 0..20 {
            let q = Tensor3::from_vec(1, 2, 3, gen(&mut rng, 6));
            let k = Tensor3::from_vec(1, 3, 3, gen(&mut rng, 9));
            let m = attention_maps(&q, &k);
            let o = oracle_maps(&q, &k);
            for (a, b) in m.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn map_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor3::from_vec(2, 4, 3, (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let k = Tensor3::from_vec(2, 5, 3, (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let m = attention_maps(&q, &k);
        for h in 0..2 {
            for r in 0..4 {
                let sum: f64 = (0..5).map(|j| m.at(h, r, j)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..5 {
                    assert!(m.at(h, r, j) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn fuse_empty_spans_bitwise_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_weights(&mut rng, 4, 5, 2, 3);
        let x = random_mat(&mut rng, 4, 4);
        let ctx = random_mat(&mut rng, 6, 5);
        let q = split_heads(&x.matmul(&w.w_q), 2);
        let opts = FusionOptions::default();
        let base = fuse(&q, &ctx, &[], FusionMode::Baseline, &w, &opts).unwrap();
        for mode in [FusionMode::MultiValue, FusionMode::MultiKey] {
            let o = fuse(&q, &ctx, &[], mode, &w, &opts).unwrap();
            assert_eq!(o, base);
        }
    }

    #[test]
    fn multivalue_identical_span_equals_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_weights(&mut rng, 4, 5, 2, 3);
        let x = random_mat(&mut rng, 4, 4);
        let ctx = random_mat(&mut rng, 6, 5);
        let q = split_heads(&x.matmul(&w.w_q), 2);
        let opts = FusionOptions::default();
        let base = fuse(&q, &ctx, &[], FusionMode::Baseline, &w, &opts).unwrap();
        // k=1 identical span: (x + x)/2 is exact in floating point.
        let mv = fuse(&q, &ctx, &[ctx.clone()], FusionMode::MultiValue, &w, &opts).unwrap();
        assert_eq!(mv, base);
    }

    #[test]
    fn multivalue_commutes_with_mean_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let w = random_weights(&mut rng, 4, 5, 2, 3);
            let x = random_mat(&mut rng, 4, 4);
            let ctx = random_mat(&mut rng, 6, 5);
            let spans: Vec<Mat<f64>> =
                (0..3).map(|_| random_mat(&mut rng, 6, 5)).collect();
            let q = split_heads(&x.matmul(&w.w_q), 2);
            let opts = FusionOptions::default();
            let mv = fuse(&q, &ctx, &spans, FusionMode::MultiValue, &w, &opts).unwrap();

            // Baseline attention applied to the arithmetic mean of the
            // value-producing contexts (projection is linear, no bias).
            let mut mean_ctx = ctx.clone();
            for s in &spans {
                for (a, &b) in mean_ctx.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
            }
            for a in mean_ctx.data_mut() {
                *a /= 4.0;
            }
            let k_p = split_heads(&ctx.matmul(&w.w_k), 2);
            let v_mean = split_heads(&mean_ctx.matmul(&w.w_v), 2);
            let m = attention_maps(&q, &k_p);
            let direct = merge_heads(&apply_maps(&m, &v_mean)).matmul(&w.w_o);
            for (a, b) in mv.data().iter().zip(direct.data()) {
                let denom = b.abs().max(1e-9);
                assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// Naive triple-loop fusion, written independently of the kernel path.
    fn oracle_fuse(
        x: &Mat<f64>,
        ctx: &Mat<f64>,
        spans: &[Mat<f64>],
        mode: FusionMode,
        w: &ProjectionWeights<f64>,
        pairing: Eq5Pairing,
    ) -> Mat<f64> {
        let n = w.num_heads;
        let d = w.w_q.cols() / n;
        let hw = x.rows();
        let lam = 1.0 / (spans.len() + 1) as f64;
        let proj = |m: &Mat<f64>, wt: &Mat<f64>| -> Vec<Vec<f64>> {
            (0..m.rows())
                .map(|r| {
                    (0..wt.cols())
                        .map(|c| (0..m.cols()).map(|k| m.at(r, k) * wt.at(k, c)).sum())
                        .collect()
                })
                .collect()
        };
        let qm = proj(x, &w.w_q);
        let contexts: Vec<&Mat<f64>> = std::iter::once(ctx).chain(spans.iter()).collect();
        let keys: Vec<Vec<Vec<f64>>> = contexts.iter().map(|c| proj(c, &w.w_k)).collect();
        let vals: Vec<Vec<Vec<f64>>> = contexts.iter().map(|c| proj(c, &w.w_v)).collect();
        let softmax_row = |q_row: &[f64], key: &[Vec<f64>], h: usize| -> Vec<f64> {
            let l = key.len();
            let mut scores = vec![0.0; l];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..d {
                    *s += q_row[h * d + c] * key[j][h * d + c];
                }
                *s /= (d as f64).sqrt();
            }
            let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        };
        let mut merged = vec![vec![0.0; n * d]; hw];
        for h in 0..n {
            for (r, merged_row) in merged.iter_mut().enumerate() {
                let mut acc = vec![0.0; d];
                match mode {
                    FusionMode::Baseline => {
                        let m = softmax_row(&qm[r], &keys[0], h);
                        for (j, mj) in m.iter().enumerate() {
                            for c in 0..d {
                                acc[c] += mj * vals[0][j][h * d + c];
                            }
                        }
                    }
                    FusionMode::MultiValue => {
                        let m = softmax_row(&qm[r], &keys[0], h);
                        for vi in &vals {
                            for (j, mj) in m.iter().enumerate() {
                                for c in 0..d {
                                    acc[c] += lam * mj * vi[j][h * d + c];
                                }
                            }
                        }
                    }
                    FusionMode::MultiKey => {
                        for (i, ki) in keys.iter().enumerate() {
                            let m = softmax_row(&qm[r], ki, h);
                            let vi = match pairing {
                                Eq5Pairing::Paired => &vals[i],
                                Eq5Pairing::FixedLast => vals.last().unwrap(),
                            };
                            for (j, mj) in m.iter().enumerate() {
                                for c in 0..d {
                                    acc[c] += lam * mj * vi[j][h * d + c];
                                }
                            }
                        }
                    }
                }
                for c in 0..d {
                    merged_row[h * d + c] = acc[c];
                }
            }
        }
        Mat::from_fn(hw, w.w_o.cols(), |r, c| {
            (0..n * d).map(|k| merged[r][k] * w.w_o.at(k, c)).sum()
        })
    }

    #[test]
    fn fuse_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..60 {
            let heads = 1 + trial % 2;
            let d = 1 + trial % 3;
            let hw = 1 + trial % 4;
            let l = 1 + trial % 5;
            let model_dim = 3;
            let ctx_dim = 4;
            let w = random_weights(&mut rng, model_dim, ctx_dim, heads, d);
            let x = random_mat(&mut rng, hw, model_dim);
            let ctx = random_mat(&mut rng, l, ctx_dim);
            let k = trial % 3;
            let spans: Vec<Mat<f64>> =
                (0..k).map(|_| random_mat(&mut rng, l, ctx_dim)).collect();
            for mode in [FusionMode::Baseline, FusionMode::MultiValue, FusionMode::MultiKey] {
                for pairing in [Eq5Pairing::Paired, Eq5Pairing::FixedLast] {
                    let opts = FusionOptions { concept_weights: None, eq5_pairing: pairing };
                    let q = split_heads(&x.matmul(&w.w_q), heads);
                    let got = fuse(&q, &ctx, &spans, mode, &w, &opts).unwrap();
                    let want = oracle_fuse(&x, &ctx, &spans, mode, &w, pairing);
                    for (a, b) in got.data().iter().zip(want.data()) {
                        assert!((a - b).abs() < 1e-6, "mode {mode:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_order_fixed_summation_is_bitwise_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = random_weights(&mut rng, 4, 5, 2, 3);
        let x = random_mat(&mut rng, 4, 4);
        let ctx = random_mat(&mut rng, 6, 5);
        let spans: Vec<Mat<f64>> = (0..2).map(|_| random_mat(&mut rng, 6, 5)).collect();
        let q = split_heads(&x.matmul(&w.w_q), 2);
        let opts = FusionOptions::default();
        let a = fuse(&q, &ctx, &spans, FusionMode::MultiKey, &w, &opts).unwrap();
        let b = fuse(&q, &ctx, &spans, FusionMode::MultiKey, &w, &opts).unwrap();
        assert_eq!(a, b);
    }
}
