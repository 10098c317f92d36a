//! Two-stage propagation over the multi-scale graph.
//!
//! Stage 1 smooths the `N_k` nodes of each scale bucket with an adjacency
//! computed per timestep from the higher-scale states. Stage 2 mixes the
//! `5 + 1 − k` scale vectors of each attribute with a static learned
//! adjacency. Both use `P = D^{-1/2} Â D^{-1/2}` with
//! `Â = softplus((R + Rᵀ)/2) + ε·I`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::params::{Bound, ParamBuilder};
use crate::reservoir::bucket_sizes;
use crate::types::{AttributeId, N_ATTR, N_SCALES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub dim: usize,
    /// Edge function of scales 1..4; `None` for scale 5.
    pub edge: [Option<EdgeFn>; N_SCALES],
    /// Bias matrices `A^k`, `[N_k, N_k]`.
    pub bias: [ParamId; N_SCALES],
    /// Raw cross-scale matrices, `[6 − k, 6 − k]` per attribute.
    pub cross: [ParamId; N_ATTR],
    pub self_loop: f64,
}

/// Width of the edge-function input at scale `k`: `d · Σ_{l>k} N_l`.
pub fn context_width(k: usize, d: usize) -> usize {
    bucket_sizes()[k..].iter().sum::<usize>() * d
}

impl GraphParams {
    pub fn register(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize, self_loop: f64) -> Self {
        let sizes = bucket_sizes();
        let edge = std::array::from_fn(|l| {
            let k = l + 1;
            (k < N_SCALES).then(|| {
                let n = sizes[l];
                EdgeFn {
                    w1: pb.xavier(&format!("graph.s{k}.edge.w1"), hidden, context_width(k, dim)),
                    b1: pb.zeros(&format!("graph.s{k}.edge.b1"), &[hidden]),
                    w2: pb.xavier(&format!("graph.s{k}.edge.w2"), n * n, hidden),
                }
            })
        });
        let bias = std::array::from_fn(|l| pb.zeros(&format!("graph.s{}.bias", l + 1), &[sizes[l], sizes[l]]));
        let cross = AttributeId::ALL.map(|a| {
            let m = N_SCALES + 1 - a.time_scale();
            pb.zeros(&format!("graph.{a}.cross"), &[m, m])
        });
        Self {
            dim,
            edge,
            bias,
            cross,
            self_loop,
        }
    }
}

/// `softplus((R + Rᵀ)/2) + ε·I` for `raw` of shape `[.., N, N]`.
pub fn nonnegative_adjacency<'t>(raw: Var<'t>, self_loop: f64) -> Result<Var<'t>> {
    let shape = raw.shape();
    let n = shape[shape.len() - 1];
    let sym = raw.add(raw.transpose_last()?)?.scale(0.5);
    let eye = raw.tape().constant(Tensor::eye(n).scale(self_loop));
    sym.softplus().add(eye)
}

/// `D^{-1/2} Â D^{-1/2}` for `Â` of shape `[T, N, N]` or `[N, N]`.
pub fn normalized<'t>(a: Var<'t>) -> Result<Var<'t>> {
    let shape = a.shape();
    let r = shape.len();
    let dinv = a.sum_axis(r - 1)?.powf(-0.5);
    let mut col = shape.clone();
    col[r - 1] = 1;
    let mut row = shape.clone();
    row[r - 2] = 1;
    let left = dinv.reshape(&col)?;
    let right = dinv.reshape(&row)?;
    left.mul(a)?.mul(right)
}

/// `[T, N, N]` raw adjacency of scale `k` from the higher-scale buckets.
fn raw_adjacency<'t>(
    bound: &Bound<'t, '_>,
    p: &GraphParams,
    k: usize,
    states: &[Var<'t>],
    steps: usize,
) -> Result<Var<'t>> {
    let n = bucket_sizes()[k - 1];
    let bias = bound.get(p.bias[k - 1]).reshape(&[1, n, n])?;
    let Some(edge) = p.edge[k - 1] else {
        let ones = bound.constant(Tensor::full(&[steps, 1, 1], 1.0));
        return ones.mul(bias);
    };
    let parts: Vec<Var<'t>> = states[k..]
        .iter()
        .map(|h| {
            let s = h.shape();
            h.reshape(&[steps, s[1] * s[2]])
        })
        .collect::<Result<_>>()?;
    let ctx = Var::concat(&parts, 1)?;
    if ctx.shape()[1] != context_width(k, p.dim) {
        return Err(Error::Shape {
            op: "edge function",
            lhs: vec![steps, context_width(k, p.dim)],
            rhs: ctx.shape(),
        });
    }
    let hidden = ctx.matmul_t(bound.get(edge.w1))?.add(bound.get(edge.b1))?.tanh();
    let out = hidden.matmul_t(bound.get(edge.w2))?.reshape(&[steps, n, n])?;
    out.add(bias)
}

/// Dynamic adjacency `Â^k` for every timestep, `[T, N_k, N_k]`.
pub fn dynamic_adjacency_tape<'t>(
    bound: &Bound<'t, '_>,
    p: &GraphParams,
    k: usize,
    states: &[Var<'t>],
) -> Result<Var<'t>> {
    if !(1..=N_SCALES).contains(&k) {
        return Err(Error::invalid(format!("time scale {k} outside 1..=5")));
    }
    let steps = states[0].shape()[0];
    nonnegative_adjacency(raw_adjacency(bound, p, k, states, steps)?, p.self_loop)
}

/// Dynamic adjacency for a single step; `context` is the concatenation of
/// the scale-`>k` vectors (empty for `k = 5`).
pub fn dynamic_adjacency(k: usize, context: &[f64], p: &GraphParams, store: &ParamStore) -> Result<Tensor> {
    if !(1..=N_SCALES).contains(&k) {
        return Err(Error::invalid(format!("time scale {k} outside 1..=5")));
    }
    if context.len() != context_width(k, p.dim) {
        return Err(Error::Shape {
            op: "edge function",
            lhs: vec![context_width(k, p.dim)],
            rhs: vec![context.len()],
        });
    }
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let sizes = bucket_sizes();
    let d = p.dim;
    let mut states = Vec::with_capacity(N_SCALES);
    let mut off = 0;
    for (l, &n) in sizes.iter().enumerate() {
        if l < k {
            states.push(tape.constant(Tensor::zeros(&[1, n, d])));
        } else {
            states.push(tape.constant(Tensor::new(&[1, n, d], context[off..off + n * d].to_vec())?));
            off += n * d;
        }
    }
    let a = dynamic_adjacency_tape(&bound, p, k, &states)?;
    let n = sizes[k - 1];
    let out = a.value().clone().reshape(&[n, n])?;
    Ok(out)
}

/// `D^{-1/2} Â D^{-1/2} H` for one graph: `h` is `[N, d]`, `a` is `[N, N]`
/// with positive row sums.
pub fn propagate(h: &Tensor, a: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    if a.shape() != [n, n] || h.shape().first() != Some(&n) {
        return Err(Error::Shape {
            op: "propagate",
            lhs: a.shape().to_vec(),
            rhs: h.shape().to_vec(),
        });
    }
    let p = propagation_matrix(a)?;
    let out = p.matmul(h)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("graph propagation".into()));
    }
    Ok(out)
}

/// Stage-1 smoothing of one bucket.
pub fn intra_scale_propagate(h: &Tensor, a: &Tensor) -> Result<Tensor> {
    propagate(h, a)
}

/// Stage-2 mixing of one attribute's scale vectors (`[6 − k, d]`) with its
/// static adjacency.
pub fn cross_scale_propagate(attr: AttributeId, h: &Tensor, p: &GraphParams, store: &ParamStore) -> Result<Tensor> {
    propagate(h, &static_adjacency(store.get(p.cross[attr.index()]), p.self_loop)?)
}

/// `softplus((R + Rᵀ)/2) + ε·I` without a tape.
pub fn static_adjacency(raw: &Tensor, self_loop: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let a = nonnegative_adjacency(tape.constant(raw.clone()), self_loop)?;
    let v = a.value().clone();
    Ok(v)
}

/// `D^{-1/2} Â D^{-1/2}`.
pub fn propagation_matrix(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid("adjacency entries must be finite and nonnegative"));
    }
    let tape = Tape::new();
    let p = normalized(tape.constant(a.clone()))?;
    let v = p.value().clone();
    if !v.all_finite() {
        return Err(Error::NonFinite("degree normalization".into()));
    }
    Ok(v)
}

/// Dominant eigenvalue modulus by power iteration (tolerance `1e-10`, at
/// most `10⁴` iterations).
pub fn spectral_radius(p: &Tensor) -> Result<f64> {
    let n = p.shape()[0];
    if p.shape() != [n, n] {
        return Err(Error::invalid(format!("spectral radius of non-square {:?}", p.shape())));
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let first = norm(&v);
    v.iter_mut().for_each(|x| *x /= first);
    let mut prev = f64::NAN;
    for _ in 0..10_000 {
        let w = p.matvec(&v);
        let est = norm(&w);
        if est == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / est).collect();
        if (est - prev).abs() <= 1e-10 * est.max(1.0) {
            return Ok(est);
        }
        prev = est;
    }
    let last = norm(&p.matvec(&v));
    Err(Error::Convergence { prev, last })
}

/// Residual concatenation `[h; h̃; ĥ]`.
pub fn residual_concat(h: &[f64], intra: &[f64], cross: &[f64]) -> Vec<f64> {
    [h, intra, cross].concat()
}

/// Output of the graph stage for one sequence.
pub struct GraphOutput<'t> {
    /// `h_star[a][j]` is `h*` of attribute `a` at scale `k + j`, `[T, 3d]`.
    pub h_star: Vec<Vec<Var<'t>>>,
    /// Per-scale `[T, N_k, N_k]` propagation matrices.
    pub intra: Vec<Var<'t>>,
    /// Per-attribute static `[6 − k, 6 − k]` propagation matrices.
    pub cross: Vec<Var<'t>>,
    /// Per-scale adjacencies `Â^k`, `[T, N_k, N_k]`.
    pub adjacency: Vec<Var<'t>>,
}

/// Runs both propagation stages on the reservoir buckets (`[T, N_l, d]`).
pub fn forward<'t>(bound: &Bound<'t, '_>, p: &GraphParams, states: &[Var<'t>]) -> Result<GraphOutput<'t>> {
    if states.len() != N_SCALES {
        return Err(Error::invalid(format!(
            "expected {N_SCALES} state buckets, got {}",
            states.len()
        )));
    }
    let steps = states[0].shape()[0];
    let d = p.dim;
    let mut smoothed = Vec::with_capacity(N_SCALES);
    let mut intra = Vec::with_capacity(N_SCALES);
    let mut adjacency = Vec::with_capacity(N_SCALES);
    for k in 1..=N_SCALES {
        let a = dynamic_adjacency_tape(bound, p, k, states)?;
        let pm = normalized(a)?;
        smoothed.push(pm.bmm(states[k - 1])?);
        intra.push(pm);
        adjacency.push(a);
    }
    let ones = bound.constant(Tensor::full(&[steps, 1, 1], 1.0));
    let mut h_star = Vec::with_capacity(N_ATTR);
    let mut cross = Vec::with_capacity(N_ATTR);
    for a in AttributeId::ALL {
        let k = a.time_scale();
        let x = a.index();
        let m = N_SCALES + 1 - k;
        let own: Vec<Var<'t>> = (k..=N_SCALES)
            .map(|l| states[l - 1].slice(1, x, 1))
            .collect::<Result<_>>()?;
        let tilde: Vec<Var<'t>> = (k..=N_SCALES)
            .map(|l| smoothed[l - 1].slice(1, x, 1))
            .collect::<Result<_>>()?;
        let pm = normalized(nonnegative_adjacency(bound.get(p.cross[x]), p.self_loop)?)?;
        let batched = ones.mul(pm.reshape(&[1, m, m])?)?;
        let hat = batched.bmm(Var::concat(&tilde, 1)?)?;
        let mut per_scale = Vec::with_capacity(m);
        for j in 0..m {
            let parts = [
                own[j].reshape(&[steps, d])?,
                tilde[j].reshape(&[steps, d])?,
                hat.slice(1, j, 1)?.reshape(&[steps, d])?,
            ];
            per_scale.push(Var::concat(&parts, 1)?);
        }
        h_star.push(per_scale);
        cross.push(pm);
    }
    Ok(GraphOutput {
        h_star,
        intra,
        cross,
        adjacency,
    })
}

/// Writes `scale,i,j,weight` rows of the step-`t` adjacencies.
pub fn export_adjacency(path: &Path, adjacency: &[Tensor], t: usize) -> Result<()> {
    let mut out = String::from("scale,i,j,weight\n");
    for (l, a) in adjacency.iter().enumerate() {
        let n = a.shape()[1];
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!("{},{i},{j},{}\n", l + 1, a.get(&[t, i, j])));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
    }

    fn frob(t: &Tensor) -> f64 {
        t.norm()
    }

    #[test]
    fn scale_five_with_zero_bias() {
        let mut store = ParamStore::new();
        let p = GraphParams::register(&mut ParamBuilder::new(&mut store, 0), 2, 4, 1e-3);
        let a = dynamic_adjacency(5, &[], &p, &store).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let expect = 2f64.ln() + if i == j { 1e-3 } else { 0.0 };
                assert!((a.get(&[i, j]) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn very_negative_raw_leaves_self_loops() {
        let raw = Tensor::full(&[3, 3], -800.0);
        let a = static_adjacency(&raw, 1e-3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1e-3 } else { 0.0 };
                assert!((a.get(&[i, j]) - expect).abs() < 1e-300_f64.max(1e-15));
            }
        }
    }

    #[test]
    fn dynamic_adjacency_nonnegative_and_context_checked() {
        let mut store = ParamStore::new();
        let p = GraphParams::register(&mut ParamBuilder::new(&mut store, 3), 2, 8, 1e-3);
        let mut rng = RngStream::new(1, 2);
        for trial in 0..100 {
            let k = 1 + trial % 5;
            let ctx: Vec<f64> = (0..context_width(k, 2)).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
            let a = dynamic_adjacency(k, &ctx, &p, &store).unwrap();
            assert!(a.data().iter().all(|&x| x >= 0.0));
            for i in 0..a.shape()[0] {
                assert!(a.get(&[i, i]) >= 1e-3);
            }
        }
        assert!(dynamic_adjacency(2, &[0.0; 3], &p, &store).is_err());
    }

    #[test]
    fn identity_and_all_ones_propagation() {
        let h = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        assert_eq!(intra_scale_propagate(&h, &Tensor::eye(2)).unwrap(), h);
        let out = intra_scale_propagate(&h, &Tensor::full(&[2, 2], 1.0)).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((out.get(&[r, c]) - (h.get(&[0, c]) + h.get(&[1, c])) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scale_five_cross_graph_is_identity() {
        let mut store = ParamStore::new();
        let p = GraphParams::register(&mut ParamBuilder::new(&mut store, 3), 3, 4, 1e-3);
        store.get_mut(p.cross[AttributeId::Width.index()]).data_mut()[0] = 3.7;
        let h = Tensor::new(&[1, 3], vec![0.5, -2.0, 1.0]).unwrap();
        let out = cross_scale_propagate(AttributeId::Width, &h, &p, &store).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn propagation_is_non_expansive() {
        let mut rng = RngStream::new(4, 4);
        for n in [2, 3, 5, 12] {
            for _ in 0..25 {
                let raw = rand_tensor(&[n, n], &mut rng, -4.0, 4.0);
                let a = static_adjacency(&raw, 1e-3).unwrap();
                let p = propagation_matrix(&a).unwrap();
                let rho = spectral_radius(&p).unwrap();
                assert!(rho <= 1.0 + 1e-8, "{rho}");
                let h = rand_tensor(&[n, 4], &mut rng, -3.0, 3.0);
                let out = propagate(&h, &a).unwrap();
                assert!(frob(&out) <= frob(&h) * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn spectral_radius_simple_cases() {
        assert!((spectral_radius(&Tensor::eye(4)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_radius(&Tensor::eye(4).scale(0.5)).unwrap() - 0.5).abs() < 1e-12);
        // rotation by 90° has two eigenvalues of modulus 1 and oscillates
        let rot = Tensor::new(&[2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!((spectral_radius(&rot).unwrap() - 1.0).abs() < 1e-12);
        let flip = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!((spectral_radius(&flip).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_concat_blocks() {
        let z = residual_concat(&[0.0; 2], &[0.0; 2], &[0.0; 2]);
        assert_eq!(z, vec![0.0; 6]);
        let (a, b, c) = ([1.0, 2.0], [3.0, -1.0], [0.5, 0.5]);
        let cat = residual_concat(&a, &b, &c);
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!((sq(&cat) - sq(&a) - sq(&b) - sq(&c)).abs() < 1e-15);
        assert_eq!(&cat[2..4], &b);
    }

    #[test]
    fn forward_shapes_and_counts() {
        let d = 2;
        let steps = 3;
        let mut store = ParamStore::new();
        let p = GraphParams::register(&mut ParamBuilder::new(&mut store, 5), d, 4, 1e-3);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &store);
        let mut rng = RngStream::new(2, 2);
        let states: Vec<Var> = bucket_sizes()
            .iter()
            .map(|&n| tape.constant(rand_tensor(&[steps, n, d], &mut rng, -1.0, 1.0)))
            .collect();
        let out = forward(&bound, &p, &states).unwrap();
        assert_eq!(out.h_star.len(), 12);
        for a in AttributeId::ALL {
            assert_eq!(out.h_star[a.index()].len(), 6 - a.time_scale());
            for h in &out.h_star[a.index()] {
                assert_eq!(h.shape(), vec![steps, 3 * d]);
            }
        }
        // first block is the untouched reservoir state
        let first = out.h_star[AttributeId::Cargo.index()][1].value().clone();
        for t in 0..steps {
            for i in 0..d {
                assert_eq!(
                    first.get(&[t, i]),
                    states[4].value().get(&[t, AttributeId::Cargo.index(), i])
                );
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let adj: Vec<Tensor> = out.adjacency.iter().map(|a| a.value().clone()).collect();
        export_adjacency(&dir.path().join("adj.csv"), &adj, 1).unwrap();
        let text = std::fs::read_to_string(dir.path().join("adj.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 9 + 36 + 49 + 81 + 144);
    }
}
