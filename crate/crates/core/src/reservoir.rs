//! Fixed-weight deep echo state network with leaky-integrator layers.
//!
//! Layer `l` holds `N_l` independent node streams that share the layer's
//! weights. Its input is the layer-`(l−1)` state of every attribute with scale
//! `< l`, followed by the embeddings of the attributes whose scale is exactly
//! `l`. Because the taxonomy is scale-sorted, node `i` of every bucket is
//! attribute `i`.

use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::{hash_bytes, stream_id, CustomOp, RngStream, Tape, Tensor, Var};
use crate::types::{feature_count, AttributeId, N_ATTR, N_SCALES};

/// Bucket sizes `N_1..N_5`.
pub fn bucket_sizes() -> [usize; N_SCALES] {
    std::array::from_fn(|l| feature_count(l + 1).expect("scale in range"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirLayer {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
    pub leak: f64,
}

impl ReservoirLayer {
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// One leaky update for a single node stream.
    pub fn step(&self, h_prev: &[f64], input: &[f64]) -> Vec<f64> {
        let hbar = self.candidate(h_prev, input);
        h_prev
            .iter()
            .zip(&hbar)
            .map(|(p, c)| (1.0 - self.leak) * p + self.leak * c)
            .collect()
    }

    /// `tanh(W_h·input + W̄_h·h_prev + b_h)`.
    pub fn candidate(&self, h_prev: &[f64], input: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut a = self.bias.data().to_vec();
        gemv_acc(self.w_in.data(), input, &mut a, d);
        gemv_acc(self.w_rec.data(), h_prev, &mut a, d);
        a.iter().map(|x| x.tanh()).collect()
    }

    /// `(1−γ)I + γ·W̄_h`.
    pub fn effective_map(&self) -> DMatrix<f64> {
        let d = self.dim();
        let w = DMatrix::from_row_slice(d, d, self.w_rec.data());
        DMatrix::identity(d, d) * (1.0 - self.leak) + w * self.leak
    }

    /// Runs every node stream of `inputs` (`[T, n, d]`, flat) from the
    /// initial states `h0` (`[n, d]`, zero when `None`). Returns the states
    /// and the tanh candidates, both `[T, n, d]`.
    pub fn run(&self, inputs: &[f64], n: usize, h0: Option<&[f64]>, reverse: bool) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let steps = inputs.len() / (n * d).max(1);
        let mut states = vec![0.0; inputs.len()];
        let mut hbar = vec![0.0; inputs.len()];
        let g = self.leak;
        for node in 0..n {
            let mut h = match h0 {
                Some(h0) => h0[node * d..(node + 1) * d].to_vec(),
                None => vec![0.0; d],
            };
            for s in 0..steps {
                let t = if reverse { steps - 1 - s } else { s };
                let off = (t * n + node) * d;
                let c = self.candidate(&h, &inputs[off..off + d]);
                for i in 0..d {
                    h[i] = (1.0 - g) * h[i] + g * c[i];
                }
                states[off..off + d].copy_from_slice(&h);
                hbar[off..off + d].copy_from_slice(&c);
            }
        }
        (states, hbar)
    }
}

fn gemv_acc(w: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += w[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn gemv_t_acc(w: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            for (o, a) in out.iter_mut().zip(&w[r * d..(r + 1) * d]) {
                *o += a * xr;
            }
        }
    }
}

/// Five fixed layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirStack {
    pub layers: Vec<ReservoirLayer>,
    pub spectral_target: f64,
}

/// Largest eigenvalue modulus, from the real Schur form.
pub fn eigen_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Builds a stack whose weights come from streams keyed by `(seed, tag, layer)`.
///
/// Entries of `W_h` and `b_h` are uniform in `±1/√d`; `W̄_h` is uniform in
/// `±1` and then scaled by the `c > 0` that puts the spectral radius of
/// `(1−γ)I + γcW̄_h` at exactly `ρ*`.
pub fn init_reservoir(seed: u64, tag: &str, d: usize, rho: f64, leak: &[f64; N_SCALES]) -> Result<ReservoirStack> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("spectral target {rho} outside (0, 1)")));
    }
    if d == 0 {
        return Err(Error::invalid("reservoir width must be positive"));
    }
    let mut layers = Vec::with_capacity(N_SCALES);
    for (l, &g) in leak.iter().enumerate() {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::invalid(format!(
                "leak rate {g} of layer {} outside (0, 1]",
                l + 1
            )));
        }
        if 1.0 - g >= rho {
            return Err(Error::invalid(format!(
                "layer {}: leak rate {g} cannot reach spectral radius {rho} (1 − γ ≥ ρ*)",
                l + 1
            )));
        }
        let mut rng = RngStream::new(seed, stream_id(&[hash_bytes(tag.as_bytes()), l as u64]));
        let s = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize, a: f64| (0..n).map(|_| rng.uniform_range(-a, a)).collect::<Vec<_>>();
        let w_in = draw(d * d, s);
        let bias = draw(d, s);
        let w_raw = draw(d * d, 1.0);
        let eig = DMatrix::from_row_slice(d, d, &w_raw).complex_eigenvalues();
        let radius = |c: f64| eig.iter().map(|z| (z * (g * c) + (1.0 - g)).norm()).fold(0.0, f64::max);
        let mut hi = 1.0;
        while radius(hi) < rho {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::invalid(format!(
                    "layer {}: recurrent weights are nilpotent",
                    l + 1
                )));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if radius(mid) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        layers.push(ReservoirLayer {
            w_in: Tensor::new(&[d, d], w_in)?,
            w_rec: Tensor::new(&[d, d], w_raw.iter().map(|w| w * c).collect())?,
            bias: Tensor::new(&[d], bias)?,
            leak: g,
        });
    }
    Ok(ReservoirStack {
        layers,
        spectral_target: rho,
    })
}

/// Per-attribute state streams: `streams[j]` is the `[T, d]` state of layer
/// `k + j` for an attribute at scale `k`.
pub type AttributeStreams = Vec<Vec<f64>>;

impl ReservoirStack {
    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    /// Runs one attribute at scale `k` through layers `k..=5`, its
    /// embedding (`[T, d]`) acting as the layer-`(k−1)` output.
    pub fn run_attribute(&self, k: usize, embedding: &[f64], reverse: bool) -> AttributeStreams {
        let mut input = embedding.to_vec();
        let mut out = Vec::with_capacity(N_SCALES + 1 - k);
        for layer in &self.layers[k - 1..] {
            let (h, _) = layer.run(&input, 1, None, reverse);
            out.push(h.clone());
            input = h;
        }
        out
    }

    /// All attributes at once; `embeddings[a]` is the `[T, d]` embedding of
    /// attribute `a`. Returns one `[T, N_l, d]` tensor per scale.
    pub fn run_all(&self, embeddings: &[Tensor], reverse: bool) -> Result<Vec<Tensor>> {
        check_embeddings(embeddings, self.dim())?;
        let steps = embeddings[0].shape()[0];
        let mut out: Vec<Tensor> = Vec::with_capacity(N_SCALES);
        for (l, layer) in self.layers.iter().enumerate() {
            let input = layer_input(out.last(), embeddings, l, steps, self.dim());
            let n = bucket_sizes()[l];
            let (h, _) = layer.run(&input, n, None, reverse);
            out.push(Tensor::new(&[steps, n, self.dim()], h)?);
        }
        Ok(out)
    }
}

fn check_embeddings(embeddings: &[Tensor], d: usize) -> Result<()> {
    if embeddings.len() != N_ATTR {
        return Err(Error::invalid(format!(
            "expected {N_ATTR} embeddings, got {}",
            embeddings.len()
        )));
    }
    let steps = embeddings[0].shape()[0];
    for e in embeddings {
        if e.shape() != [steps, d] {
            return Err(Error::Shape {
                op: "reservoir input",
                lhs: vec![steps, d],
                rhs: e.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `[T, N_l, d]` input of layer `l` (0-based): previous states then new
/// embeddings, node by node.
fn layer_input(prev: Option<&Tensor>, embeddings: &[Tensor], l: usize, steps: usize, d: usize) -> Vec<f64> {
    let sizes = bucket_sizes();
    let n_prev = if l == 0 { 0 } else { sizes[l - 1] };
    let n = sizes[l];
    let mut input = vec![0.0; steps * n * d];
    for t in 0..steps {
        if let Some(p) = prev {
            input[t * n * d..(t * n + n_prev) * d].copy_from_slice(&p.data()[t * n_prev * d..(t + 1) * n_prev * d]);
        }
        for node in n_prev..n {
            input[(t * n + node) * d..(t * n + node + 1) * d]
                .copy_from_slice(&embeddings[node].data()[t * d..(t + 1) * d]);
        }
    }
    input
}

/// Forward and (optionally) reverse stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct Reservoir {
    pub forward: ReservoirStack,
    pub reverse: Option<ReservoirStack>,
}

impl Reservoir {
    pub fn new(seed: u64, d: usize, rho: f64, leak: &[f64; N_SCALES], bidirectional: bool) -> Result<Self> {
        Ok(Self {
            forward: init_reservoir(seed, "reservoir.fwd", d, rho, leak)?,
            reverse: if bidirectional {
                Some(init_reservoir(seed, "reservoir.rev", d, rho, leak)?)
            } else {
                None
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.forward.dim()
    }

    /// Streams of one attribute; bidirectional mode averages the forward
    /// pass with the reverse stack's pass over the time-reversed input.
    pub fn run_attribute(&self, attr: AttributeId, embedding: &[f64]) -> AttributeStreams {
        let k = attr.time_scale();
        let mut f = self.forward.run_attribute(k, embedding, false);
        if let Some(rev) = &self.reverse {
            let r = rev.run_attribute(k, embedding, true);
            for (a, b) in f.iter_mut().zip(&r) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = 0.5 * (*x + y);
                }
            }
        }
        f
    }

    /// Scale buckets `[T, N_l, d]` without a tape.
    pub fn run_values(&self, embeddings: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut f = self.forward.run_all(embeddings, false)?;
        if let Some(rev) = &self.reverse {
            let r = rev.run_all(embeddings, true)?;
            for (a, b) in f.iter_mut().zip(&r) {
                *a = a.zip_map(b, |x, y| 0.5 * (x + y));
            }
        }
        Ok(f)
    }

    /// Scale buckets on the tape. Gradients reach the embeddings through
    /// truncation-free backpropagation in time; the weights stay fixed.
    pub fn run_tape<'t>(&self, embeddings: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let f = run_stack_tape(&self.forward, embeddings, false)?;
        let Some(rev) = &self.reverse else { return Ok(f) };
        let r = run_stack_tape(rev, embeddings, true)?;
        f.into_iter().zip(r).map(|(a, b)| Ok(a.add(b)?.scale(0.5))).collect()
    }
}

fn run_stack_tape<'t>(stack: &ReservoirStack, embeddings: &[Var<'t>], reverse: bool) -> Result<Vec<Var<'t>>> {
    let vals: Vec<Tensor> = embeddings.iter().map(|e| e.value().clone()).collect();
    let d = stack.dim();
    check_embeddings(&vals, d)?;
    let tape: &'t Tape = embeddings[0].tape();
    let steps = vals[0].shape()[0];
    let sizes = bucket_sizes();
    let mut out: Vec<Var<'t>> = Vec::with_capacity(N_SCALES);
    for (l, layer) in stack.layers.iter().enumerate() {
        let n_prev = if l == 0 { 0 } else { sizes[l - 1] };
        let mut parts: Vec<Var<'t>> = out.last().copied().into_iter().collect();
        for node in n_prev..sizes[l] {
            parts.push(embeddings[node].reshape(&[steps, 1, d])?);
        }
        let u = Var::concat(&parts, 1)?;
        let n = sizes[l];
        let (h, hbar) = layer.run(u.value().data(), n, None, reverse);
        let op = LayerOp {
            layer: layer.clone(),
            n,
            hbar,
            reverse,
        };
        out.push(tape.custom(&[u], Tensor::new(&[steps, n, d], h)?, Rc::new(op)));
    }
    Ok(out)
}

struct LayerOp {
    layer: ReservoirLayer,
    n: usize,
    hbar: Vec<f64>,
    reverse: bool,
}

impl CustomOp for LayerOp {
    fn name(&self) -> &str {
        "reservoir_layer"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = self.layer.dim();
        let n = self.n;
        let steps = output.shape()[0];
        let g = self.layer.leak;
        let (w_in, w_rec) = (self.layer.w_in.data(), self.layer.w_rec.data());
        let mut du = vec![0.0; grad.len()];
        let mut c = vec![0.0; d];
        let mut da = vec![0.0; d];
        for node in 0..n {
            let mut carry = vec![0.0; d];
            for s in 0..steps {
                // reverse of the forward visiting order
                let t = if self.reverse { s } else { steps - 1 - s };
                let off = (t * n + node) * d;
                for i in 0..d {
                    c[i] = grad.data()[off + i] + carry[i];
                    let hb = self.hbar[off + i];
                    da[i] = g * c[i] * (1.0 - hb * hb);
                }
                gemv_t_acc(w_in, &da, &mut du[off..off + d], d);
                for i in 0..d {
                    carry[i] = (1.0 - g) * c[i];
                }
                gemv_t_acc(w_rec, &da, &mut carry, d);
            }
        }
        vec![Some(Tensor::new(output.shape(), du).expect("grad shape"))]
    }
}

/// Multi-scale state at one timestep: `buckets[l]` holds `N_l` vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleState {
    pub buckets: Vec<Vec<Vec<f64>>>,
}

impl MultiScaleState {
    pub fn node_count(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    /// `[H^1, …, H^5]` flattened.
    pub fn concatenated(&self) -> Vec<f64> {
        self.buckets.iter().flatten().flatten().copied().collect()
    }
}

/// Gathers the step-`t` vectors of every attribute's streams into scale
/// buckets. `streams[a]` must hold `5 + 1 − k` streams for an attribute at
/// scale `k`.
pub fn consolidate(streams: &[Option<AttributeStreams>], t: usize, d: usize) -> Result<MultiScaleState> {
    let mut buckets = vec![Vec::new(); N_SCALES];
    for a in AttributeId::ALL {
        let s = streams
            .get(a.index())
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::invalid(format!("missing reservoir stream for {a}")))?;
        let k = a.time_scale();
        if s.len() != N_SCALES + 1 - k {
            return Err(Error::invalid(format!(
                "{a}: {} streams, expected {}",
                s.len(),
                N_SCALES + 1 - k
            )));
        }
        for (j, stream) in s.iter().enumerate() {
            buckets[k - 1 + j].push(stream[t * d..(t + 1) * d].to_vec());
        }
    }
    Ok(MultiScaleState { buckets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamStore, Tape};

    const LEAK: [f64; 5] = [1.0, 0.5, 0.5, 0.25, 0.25];

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 7);
        (0..n).map(|_| r.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn bucket_sizes_match_taxonomy() {
        assert_eq!(bucket_sizes(), [3, 6, 7, 9, 12]);
        assert_eq!(bucket_sizes().iter().sum::<usize>(), 37);
    }

    #[test]
    fn effective_radius_hits_target() {
        let s = init_reservoir(3, "t", 16, 0.9, &LEAK).unwrap();
        for layer in &s.layers {
            let m = layer.effective_map();
            assert!((eigen_radius(&m) - 0.9).abs() < 1e-6);
            // growth-rate oracle: ‖M^k v‖^{1/k} tends to ρ
            let mut v = nalgebra::DVector::from_element(16, 1.0);
            let k = 2000;
            let mut log_norm = 0.0;
            for _ in 0..k {
                v = &m * v;
                let nv = v.norm();
                log_norm += nv.ln();
                v /= nv;
            }
            assert!(((log_norm / k as f64).exp() - 0.9).abs() < 5e-3);
        }
    }

    #[test]
    fn unit_leak_scales_raw_matrix() {
        let s = init_reservoir(5, "t", 8, 0.5, &[1.0; 5]).unwrap();
        let w = DMatrix::from_row_slice(8, 8, s.layers[0].w_rec.data());
        assert!((eigen_radius(&w) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_rejects_infeasible_leak() {
        let a = init_reservoir(9, "t", 8, 0.9, &LEAK).unwrap();
        let b = init_reservoir(9, "t", 8, 0.9, &LEAK).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_reservoir(9, "u", 8, 0.9, &LEAK).unwrap());
        let bad = [1.0, 0.5, 0.25, 0.125, 0.0625];
        assert!(init_reservoir(9, "t", 8, 0.9, &bad).is_err());
        assert!(init_reservoir(9, "t", 8, 1.0, &LEAK).is_err());
    }

    #[test]
    fn step_arithmetic() {
        let d = 3;
        let zero = ReservoirLayer {
            w_in: Tensor::zeros(&[d, d]),
            w_rec: Tensor::zeros(&[d, d]),
            bias: Tensor::zeros(&[d]),
            leak: 0.5,
        };
        assert_eq!(zero.step(&[0.0; 3], &[0.0; 3]), vec![0.0; 3]);
        let mut layer = zero.clone();
        layer.bias = Tensor::from_vec(vec![0.3, -0.2, 0.1]);
        let v = [0.4, 0.4, -0.4];
        let w: Vec<f64> = layer.bias.data().iter().map(|b| b.tanh()).collect();
        let h = layer.step(&v, &[0.0; 3]);
        for i in 0..3 {
            assert!((h[i] - (v[i] + w[i]) / 2.0).abs() < 1e-15);
        }
        layer.leak = 1.0;
        assert_eq!(layer.step(&v, &[0.0; 3]), w);
    }

    #[test]
    fn stream_counts_follow_scale() {
        let s = init_reservoir(1, "t", 4, 0.9, &LEAK).unwrap();
        let e = random(20, 1);
        for a in AttributeId::ALL {
            assert_eq!(s.run_attribute(a.time_scale(), &e, false).len(), 6 - a.time_scale());
        }
    }

    #[test]
    fn single_step_cascade() {
        let s = init_reservoir(2, "t", 4, 0.9, &LEAK).unwrap();
        let e = random(4, 2);
        let streams = s.run_attribute(3, &e, false);
        let mut x = e.clone();
        for (j, l) in (2..5).enumerate() {
            let layer = &s.layers[l];
            let mut a = layer.bias.data().to_vec();
            for r in 0..4 {
                for c in 0..4 {
                    a[r] += layer.w_in.get(&[r, c]) * x[c];
                }
            }
            x = a.iter().map(|v| layer.leak * v.tanh()).collect();
            for i in 0..4 {
                assert!((streams[j][i] - x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn palindrome_gives_symmetric_states() {
        let s = init_reservoir(4, "t", 4, 0.9, &LEAK).unwrap();
        let res = Reservoir {
            forward: s.clone(),
            reverse: Some(s),
        };
        let steps = 9;
        let half = random(4 * 5, 3);
        let mut e = vec![0.0; steps * 4];
        for t in 0..steps {
            let src = t.min(steps - 1 - t);
            e[t * 4..(t + 1) * 4].copy_from_slice(&half[src * 4..(src + 1) * 4]);
        }
        let out = res.run_attribute(AttributeId::Lon, &e);
        for stream in &out {
            for t in 0..steps {
                for i in 0..4 {
                    assert!((stream[t * 4 + i] - stream[(steps - 1 - t) * 4 + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_mode_matches_run_attribute() {
        let res = Reservoir::new(6, 4, 0.9, &LEAK, false).unwrap();
        let e = random(24, 4);
        assert_eq!(
            res.run_attribute(AttributeId::Speed, &e),
            res.forward.run_attribute(2, &e, false)
        );
    }

    #[test]
    fn bucketed_run_matches_per_attribute_runs() {
        let res = Reservoir::new(8, 4, 0.9, &LEAK, true).unwrap();
        let steps = 5;
        let emb: Vec<Tensor> = (0..N_ATTR)
            .map(|a| Tensor::new(&[steps, 4], random(steps * 4, a as u64 + 10)).unwrap())
            .collect();
        let buckets = res.run_values(&emb).unwrap();
        let streams: Vec<Option<AttributeStreams>> = AttributeId::ALL
            .iter()
            .map(|&a| Some(res.run_attribute(a, emb[a.index()].data())))
            .collect();
        for t in 0..steps {
            let state = consolidate(&streams, t, 4).unwrap();
            assert_eq!(state.node_count(), 37);
            for l in 0..N_SCALES {
                assert_eq!(state.buckets[l].len(), bucket_sizes()[l]);
                for (node, v) in state.buckets[l].iter().enumerate() {
                    for i in 0..4 {
                        let b = buckets[l].get(&[t, node, i]);
                        assert!((b - v[i]).abs() < 1e-14);
                    }
                }
            }
        }
        let mut missing = streams.clone();
        missing[4] = None;
        assert!(consolidate(&missing, 0, 4).is_err());
    }

    #[test]
    fn fading_memory() {
        let d = 16;
        let s = init_reservoir(11, "t", d, 0.9, &[1.0, 0.7, 0.5, 0.35, 0.25]).unwrap();
        let steps = 260;
        let input = random(steps * d, 5);
        let mut prev_a = input.clone();
        let mut prev_b = input;
        for (l, layer) in s.layers.iter().enumerate() {
            let (ha, _) = layer.run(&prev_a, 1, Some(&random(d, 100 + l as u64)), false);
            let (hb, _) = layer.run(&prev_b, 1, Some(&random(d, 200 + l as u64)), false);
            let gap = (200 * d..steps * d).map(|i| (ha[i] - hb[i]).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-6, "layer {} gap {gap}", l + 1);
            assert!(ha.iter().all(|x| x.abs() <= 1.0));
            prev_a = ha;
            prev_b = hb;
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let res = Reservoir::new(12, 3, 0.9, &LEAK, true).unwrap();
        let steps = 4;
        let mut store = ParamStore::new();
        let ids: Vec<_> = (0..N_ATTR)
            .map(|a| {
                store.insert(
                    format!("e{a}"),
                    Tensor::new(&[steps, 3], random(steps * 3, 30 + a as u64)).unwrap(),
                )
            })
            .collect();
        let weights: Vec<Tensor> = bucket_sizes()
            .iter()
            .enumerate()
            .map(|(l, &n)| Tensor::new(&[steps, n, 3], random(steps * n * 3, 60 + l as u64)).unwrap())
            .collect();
        let loss = |store: &ParamStore| -> (f64, crate::numeric::Gradients) {
            let tape = Tape::new();
            let emb: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let out = res.run_tape(&emb).unwrap();
            let mut total = tape.constant(Tensor::scalar(0.0));
            for (o, w) in out.into_iter().zip(&weights) {
                total = total.add(o.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
            }
            let v = total.item();
            (v, tape.backward(total, store.len()).unwrap())
        };
        let (_, grads) = loss(&store);
        let h = 1e-5;
        for &id in &ids {
            for i in [0, 5, 11] {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let (up, _) = loss(&store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let (down, _) = loss(&store);
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).unwrap().data()[i];
                assert!(
                    (numeric - analytic).abs() < 1e-7 * (1.0 + numeric.abs()),
                    "{numeric} vs {analytic}"
                );
            }
        }
    }
}
