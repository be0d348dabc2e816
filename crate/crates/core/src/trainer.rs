//! Reference GNN compute operator: 2-layer GraphSAGE (mean aggregator) and a
//! GCN variant, with analytic backprop and plain SGD, plus a fixed-cost
//! synthetic trainer for pipeline benchmarking.
//!
//! Parameters are single precision in production; all of the math is generic
//! over the scalar so gradient checks can run the same code in f64.

use std::time::{Duration, Instant};

use num_traits::Float;

use crate::error::{EngineError, Result};
use crate::metrics::fnv1a;
use crate::rng::{Purpose, RngStream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnVariant {
    Sage,
    Gcn,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn map<U: Float>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `out[r] += in[r] * w` where `w` is `in_dim x out_dim`.
fn addmul_rows<T: Float>(out: &mut [T], input: &[T], w: &Matrix<T>) {
    debug_assert_eq!(input.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (i, &x) in input.iter().enumerate() {
        if x == T::zero() {
            continue;
        }
        let wrow = w.row(i);
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o = *o + x * wv;
        }
    }
}

/// `out[j] += v . w[j]` with `w` indexed `in x out`: multiplication by the
/// transpose, which is what the backward pass needs.
fn mul_transpose<T: Float>(out: &mut [T], v: &[T], w: &Matrix<T>) {
    debug_assert_eq!(v.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (j, o) in out.iter_mut().enumerate() {
        let wrow = w.row(j);
        let mut acc = T::zero();
        for (&vi, &wv) in v.iter().zip(wrow) {
            acc = acc + vi * wv;
        }
        *o = *o + acc;
    }
}

/// Model parameters. `w1` stacks the self half over the neighbor half
/// (`2*dim x hidden`); likewise `w2` (`2*hidden x classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelParams<f32> {
    /// Seeded init: weights uniform in `(-s, s)` with `s = 1/sqrt(fan_in)`,
    /// biases zero.
    pub fn init(seed: u64, dim: usize, hidden: usize, classes: usize) -> Self {
        let make = |rows: usize, cols: usize, salt: u64| {
            let s = 1.0 / (rows as f32).sqrt();
            let mut rng = RngStream::new(
                seed,
                Purpose::ParamInit,
                StreamKey {
                    salt,
                    ..Default::default()
                },
            );
            Matrix {
                rows,
                cols,
                data: (0..rows * cols)
                    .map(|_| (rng.next_f32() * 2.0 - 1.0) * s)
                    .collect(),
            }
        };
        ModelParams {
            w1: make(2 * dim, hidden, 1),
            b1: vec![0.0; hidden],
            w2: make(2 * hidden, classes, 2),
            b2: vec![0.0; classes],
            dim,
            hidden,
            classes,
        }
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            w1: self.w1.map(f64::from),
            b1: self.b1.iter().map(|&x| f64::from(x)).collect(),
            w2: self.w2.map(f64::from),
            b2: self.b2.iter().map(|&x| f64::from(x)).collect(),
            dim: self.dim,
            hidden: self.hidden,
            classes: self.classes,
        }
    }
}

/// The sampled mini-batch as the trainer sees it: a feature row per unique
/// vertex, sampled out-neighbor rows per vertex, seeds in rows `0..num_seeds`.
pub struct BatchView<'a> {
    pub features: &'a [f32],
    pub rows: usize,
    pub dim: usize,
    pub adj: &'a [Vec<u32>],
    pub num_seeds: usize,
}

impl BatchView<'_> {
    fn check(&self, params_dim: usize) -> Result<()> {
        if self.dim != params_dim {
            return Err(EngineError::Config(format!(
                "feature dim {} does not match model dim {params_dim}",
                self.dim
            )));
        }
        if self.features.len() != self.rows * self.dim || self.adj.len() != self.rows {
            return Err(EngineError::Config("batch view shape mismatch".into()));
        }
        Ok(())
    }
}

/// Forward activations kept for the backward pass.
pub struct ForwardTrace<T> {
    /// Layer-1 aggregated input per row: the neighbor mean for SAGE, the
    /// self-inclusive mean for GCN.
    agg0: Matrix<T>,
    z1: Matrix<T>,
    a1: Matrix<T>,
    /// Layer-2 aggregate per seed.
    agg1: Matrix<T>,
    pub logits: Matrix<T>,
}

fn lift_features<T: Float>(view: &BatchView) -> Matrix<T> {
    Matrix {
        rows: view.rows,
        cols: view.dim,
        data: view
            .features
            .iter()
            .map(|&x| T::from(x).unwrap())
            .collect(),
    }
}

/// Mean of `src` rows listed in `idx`, written into `out`. Empty neighbor
/// lists leave the zero vector (the stated empty-mean convention).
fn mean_rows<T: Float>(out: &mut [T], src: &Matrix<T>, idx: &[u32]) {
    if idx.is_empty() {
        return;
    }
    for &u in idx {
        for (o, &x) in out.iter_mut().zip(src.row(u as usize)) {
            *o = *o + x;
        }
    }
    let inv = T::one() / T::from(idx.len()).unwrap();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Self-inclusive mean for the GCN variant: row `r` plus its neighbors.
fn mean_rows_with_self<T: Float>(out: &mut [T], src: &Matrix<T>, r: usize, idx: &[u32]) {
    for (o, &x) in out.iter_mut().zip(src.row(r)) {
        *o = *o + x;
    }
    for &u in idx {
        for (o, &x) in out.iter_mut().zip(src.row(u as usize)) {
            *o = *o + x;
        }
    }
    let inv = T::one() / T::from(idx.len() + 1).unwrap();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Two-layer forward pass; logits are emitted only for seed rows. Pure in
/// `(view, params)`.
pub fn forward<T: Float>(
    view: &BatchView,
    params: &ModelParams<T>,
    variant: GnnVariant,
) -> Result<ForwardTrace<T>> {
    view.check(params.dim)?;
    let x = lift_features::<T>(view);
    let (dim, hidden, classes) = (params.dim, params.hidden, params.classes);
    let (w1_self, w1_nbr) = split_halves(&params.w1, dim);
    let (w2_self, w2_nbr) = split_halves(&params.w2, hidden);

    let mut agg0 = Matrix::zeros(view.rows, dim);
    let mut z1 = Matrix::zeros(view.rows, hidden);
    for r in 0..view.rows {
        match variant {
            GnnVariant::Sage => mean_rows(agg0.row_mut(r), &x, &view.adj[r]),
            GnnVariant::Gcn => mean_rows_with_self(agg0.row_mut(r), &x, r, &view.adj[r]),
        }
        let self_in: &[T] = match variant {
            GnnVariant::Sage => x.row(r),
            GnnVariant::Gcn => agg0.row(r),
        };
        let zr = z1.row_mut(r);
        zr.copy_from_slice(&params.b1);
        addmul_rows(zr, self_in, &w1_self);
        addmul_rows(zr, agg0.row(r), &w1_nbr);
    }
    let a1 = z1.map(|v| if v > T::zero() { v } else { T::zero() });

    let mut agg1 = Matrix::zeros(view.num_seeds, hidden);
    let mut logits = Matrix::zeros(view.num_seeds, classes);
    for s in 0..view.num_seeds {
        match variant {
            GnnVariant::Sage => mean_rows(agg1.row_mut(s), &a1, &view.adj[s]),
            GnnVariant::Gcn => mean_rows_with_self(agg1.row_mut(s), &a1, s, &view.adj[s]),
        }
        let self_in: &[T] = match variant {
            GnnVariant::Sage => a1.row(s),
            GnnVariant::Gcn => agg1.row(s),
        };
        let lr = logits.row_mut(s);
        lr.copy_from_slice(&params.b2);
        addmul_rows(lr, self_in, &w2_self);
        addmul_rows(lr, agg1.row(s), &w2_nbr);
    }

    Ok(ForwardTrace {
        agg0,
        z1,
        a1,
        agg1,
        logits,
    })
}

fn split_halves<T: Float>(w: &Matrix<T>, half: usize) -> (Matrix<T>, Matrix<T>) {
    debug_assert_eq!(w.rows, 2 * half);
    let top = Matrix {
        rows: half,
        cols: w.cols,
        data: w.data[..half * w.cols].to_vec(),
    };
    let bottom = Matrix {
        rows: half,
        cols: w.cols,
        data: w.data[half * w.cols..].to_vec(),
    };
    (top, bottom)
}

/// Mean softmax cross-entropy over seeds, with the per-logit gradient.
pub fn softmax_cross_entropy<T: Float>(logits: &Matrix<T>, labels: &[u32]) -> (T, Matrix<T>) {
    let s = logits.rows;
    assert_eq!(labels.len(), s);
    let mut dlogits = Matrix::zeros(s, logits.cols);
    let mut loss = T::zero();
    let inv_s = T::one() / T::from(s).unwrap();
    for r in 0..s {
        let row = logits.row(r);
        let max = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        let y = labels[r] as usize;
        loss = loss + (log_denom - row[y]) * inv_s;
        let drow = dlogits.row_mut(r);
        for (c, d) in drow.iter_mut().enumerate() {
            let p = (row[c] - log_denom).exp();
            *d = (p - if c == y { T::one() } else { T::zero() }) * inv_s;
        }
    }
    (loss, dlogits)
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Float> Gradients<T> {
    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for &g in self
            .w1
            .data
            .iter()
            .chain(&self.w2.data)
            .chain(&self.b1)
            .chain(&self.b2)
        {
            acc = acc + g * g;
        }
        acc.sqrt()
    }
}

/// Analytic gradients of the mean cross-entropy through both layers and
/// aggregations.
pub fn backward<T: Float>(
    view: &BatchView,
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dlogits: &Matrix<T>,
    variant: GnnVariant,
) -> Gradients<T> {
    let (dim, hidden) = (params.dim, params.hidden);
    let (w2_self, w2_nbr) = split_halves(&params.w2, hidden);
    let x = lift_features::<T>(view);

    let mut dw2 = Matrix::zeros(2 * hidden, params.classes);
    let mut db2 = vec![T::zero(); params.classes];
    let mut da1 = Matrix::zeros(view.rows, hidden);

    for s in 0..view.num_seeds {
        let d = dlogits.row(s);
        for (b, &g) in db2.iter_mut().zip(d) {
            *b = *b + g;
        }
        let (self_in, nbr_in): (&[T], &[T]) = match variant {
            GnnVariant::Sage => (trace.a1.row(s), trace.agg1.row(s)),
            GnnVariant::Gcn => (trace.agg1.row(s), trace.agg1.row(s)),
        };
        // dW2 halves: self rows then neighbor rows.
        {
            let (top, bottom) = dw2.data.split_at_mut(hidden * params.classes);
            for (i, &a) in self_in.iter().enumerate() {
                if a != T::zero() {
                    for (c, &g) in d.iter().enumerate() {
                        top[i * params.classes + c] = top[i * params.classes + c] + a * g;
                    }
                }
            }
            for (i, &a) in nbr_in.iter().enumerate() {
                if a != T::zero() {
                    for (c, &g) in d.iter().enumerate() {
                        bottom[i * params.classes + c] = bottom[i * params.classes + c] + a * g;
                    }
                }
            }
        }

        let mut dself = vec![T::zero(); hidden];
        let mut dnbr = vec![T::zero(); hidden];
        mul_transpose(&mut dself, d, &w2_self);
        mul_transpose(&mut dnbr, d, &w2_nbr);

        match variant {
            GnnVariant::Sage => {
                for (o, &g) in da1.row_mut(s).iter_mut().zip(&dself) {
                    *o = *o + g;
                }
                if !view.adj[s].is_empty() {
                    let inv = T::one() / T::from(view.adj[s].len()).unwrap();
                    for &u in &view.adj[s] {
                        for (o, &g) in da1.row_mut(u as usize).iter_mut().zip(&dnbr) {
                            *o = *o + g * inv;
                        }
                    }
                }
            }
            GnnVariant::Gcn => {
                let inv = T::one() / T::from(view.adj[s].len() + 1).unwrap();
                let dg: Vec<T> = dself.iter().zip(&dnbr).map(|(&a, &b)| a + b).collect();
                for (o, &g) in da1.row_mut(s).iter_mut().zip(&dg) {
                    *o = *o + g * inv;
                }
                for &u in &view.adj[s] {
                    for (o, &g) in da1.row_mut(u as usize).iter_mut().zip(&dg) {
                        *o = *o + g * inv;
                    }
                }
            }
        }
    }

    // Through the ReLU, then layer 1.
    let mut dw1 = Matrix::zeros(2 * dim, hidden);
    let mut db1 = vec![T::zero(); hidden];
    let mut dz = vec![T::zero(); hidden];
    for r in 0..view.rows {
        let mut live = false;
        for (j, d) in dz.iter_mut().enumerate() {
            let g = da1.row(r)[j];
            *d = if trace.z1.row(r)[j] > T::zero() { g } else { T::zero() };
            live = live || *d != T::zero();
        }
        if !live {
            continue;
        }
        for (b, &g) in db1.iter_mut().zip(&dz) {
            *b = *b + g;
        }
        let (self_in, nbr_in): (&[T], &[T]) = match variant {
            GnnVariant::Sage => (x.row(r), trace.agg0.row(r)),
            GnnVariant::Gcn => (trace.agg0.row(r), trace.agg0.row(r)),
        };
        let (top, bottom) = dw1.data.split_at_mut(dim * hidden);
        for (i, &a) in self_in.iter().enumerate() {
            if a != T::zero() {
                for (j, &g) in dz.iter().enumerate() {
                    top[i * hidden + j] = top[i * hidden + j] + a * g;
                }
            }
        }
        for (i, &a) in nbr_in.iter().enumerate() {
            if a != T::zero() {
                for (j, &g) in dz.iter().enumerate() {
                    bottom[i * hidden + j] = bottom[i * hidden + j] + a * g;
                }
            }
        }
    }

    Gradients {
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    }
}

/// Loss of one forward pass; the function gradient checks differentiate.
pub fn loss_only<T: Float>(
    view: &BatchView,
    params: &ModelParams<T>,
    labels: &[u32],
    variant: GnnVariant,
) -> Result<T> {
    let trace = forward(view, params, variant)?;
    Ok(softmax_cross_entropy(&trace.logits, labels).0)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStepReport {
    pub batch_id: u64,
    pub loss: f32,
    pub grad_norm: f32,
    pub step_time: Duration,
}

/// Forward, loss, backward, SGD update. Deterministic given inputs.
pub fn train_step(
    batch_id: u64,
    view: &BatchView,
    params: &mut ModelParams<f32>,
    labels: &[u32],
    lr: f32,
    variant: GnnVariant,
) -> Result<TrainStepReport> {
    let start = Instant::now();
    let trace = forward(view, params, variant)?;
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels);
    if !loss.is_finite() {
        return Err(EngineError::Config(format!("non-finite loss {loss} at batch {batch_id}")));
    }
    let grads = backward(view, params, &trace, &dlogits, variant);
    let norm = grads.norm();
    for (p, g) in params.w1.data.iter_mut().zip(&grads.w1.data) {
        *p -= lr * g;
    }
    for (p, g) in params.b1.iter_mut().zip(&grads.b1) {
        *p -= lr * g;
    }
    for (p, g) in params.w2.data.iter_mut().zip(&grads.w2.data) {
        *p -= lr * g;
    }
    for (p, g) in params.b2.iter_mut().zip(&grads.b2) {
        *p -= lr * g;
    }
    Ok(TrainStepReport {
        batch_id,
        loss,
        grad_norm: norm,
        step_time: start.elapsed(),
    })
}

/// Busy-computes for `cost` with a checksum loop over the feature matrix, so
/// the matrix bytes are actually read. Returns the first-pass checksum.
pub fn synthetic_train(batch_id: u64, features: &[f32], cost: Duration) -> (u64, TrainStepReport) {
    let start = Instant::now();
    let bytes = unsafe {
        std::slice::from_raw_parts(features.as_ptr() as *const u8, std::mem::size_of_val(features))
    };
    let checksum = fnv1a(bytes);
    let mut rolling = checksum;
    while start.elapsed() < cost {
        rolling = crate::rng::mix64(rolling);
        std::hint::black_box(rolling);
    }
    (
        checksum,
        TrainStepReport {
            batch_id,
            loss: 0.0,
            grad_norm: 0.0,
            step_time: start.elapsed(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_view<'a>(features: &'a [f32], adj: &'a [Vec<u32>], dim: usize, seeds: usize) -> BatchView<'a> {
        BatchView {
            features,
            rows: adj.len(),
            dim,
            adj,
            num_seeds: seeds,
        }
    }

    #[test]
    fn zero_params_give_uniform_softmax_loss() {
        let features = vec![0.3f32, 0.7, 0.1, 0.9, 0.5, 0.5];
        let adj = vec![vec![1, 2], vec![], vec![]];
        let view = toy_view(&features, &adj, 2, 1);
        let mut params = ModelParams::init(1, 2, 4, 3);
        params.w1.data.fill(0.0);
        params.w2.data.fill(0.0);
        for variant in [GnnVariant::Sage, GnnVariant::Gcn] {
            let trace = forward(&view, &params, variant).unwrap();
            assert!(trace.logits.data.iter().all(|&v| v == 0.0));
            let (loss, _) = softmax_cross_entropy(&trace.logits, &[1]);
            assert!((loss - 3f32.ln()).abs() < 1e-6, "loss {loss}");
        }
    }

    #[test]
    fn empty_neighborhood_means_zero_vector() {
        let features = vec![1.0f32, -2.0];
        let adj = vec![vec![]];
        let view = toy_view(&features, &adj, 2, 1);
        let params = ModelParams::init(3, 2, 4, 2);
        let trace = forward(&view, &params, GnnVariant::Sage).unwrap();
        assert!(trace.agg0.row(0).iter().all(|&v| v == 0.0));
        // GCN self-inclusive mean of a lone vertex is the vertex itself.
        let trace = forward(&view, &params, GnnVariant::Gcn).unwrap();
        assert_eq!(trace.agg0.row(0), &[1.0, -2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let features = vec![0.0f32; 4];
        let adj = vec![vec![], vec![]];
        let view = toy_view(&features, &adj, 2, 1);
        let params = ModelParams::init(1, 3, 4, 2); // dim 3 != 2
        assert!(forward(&view, &params, GnnVariant::Sage).is_err());
    }

    #[test]
    fn lr_zero_keeps_params() {
        let features = vec![0.5f32; 6];
        let adj = vec![vec![1], vec![2], vec![]];
        let view = toy_view(&features, &adj, 2, 2);
        let mut params = ModelParams::init(7, 2, 4, 2);
        let before = params.clone();
        train_step(0, &view, &mut params, &[0, 1], 0.0, GnnVariant::Sage).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn identical_steps_are_bitwise_identical() {
        let features = vec![0.25f32; 8];
        let adj = vec![vec![1, 2], vec![3], vec![], vec![0]];
        let view = toy_view(&features, &adj, 2, 2);
        let base = ModelParams::init(11, 2, 4, 2);
        let mut a = base.clone();
        let mut b = base.clone();
        let ra = train_step(0, &view, &mut a, &[0, 1], 0.1, GnnVariant::Gcn).unwrap();
        let rb = train_step(0, &view, &mut b, &[0, 1], 0.1, GnnVariant::Gcn).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    }

    #[test]
    fn synthetic_train_checksum_probes_bytes() {
        let features = vec![0.1f32, 0.2, 0.3, 0.4];
        let (a, _) = synthetic_train(0, &features, Duration::ZERO);
        let (b, _) = synthetic_train(0, &features, Duration::ZERO);
        assert_eq!(a, b, "same batch twice -> same checksum");
        let mut flipped = features.clone();
        flipped[2] = f32::from_bits(flipped[2].to_bits() ^ 1);
        let (c, _) = synthetic_train(0, &flipped, Duration::ZERO);
        assert_ne!(a, c, "bit flip must change the checksum");
    }

    #[test]
    fn synthetic_train_honors_cost_floor() {
        let features = vec![0.0f32; 16];
        let cost = Duration::from_millis(5);
        let start = Instant::now();
        synthetic_train(0, &features, cost);
        assert!(start.elapsed() >= cost);
    }
}
