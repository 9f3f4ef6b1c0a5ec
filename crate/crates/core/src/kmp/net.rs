//! Residual MLP with a hand-written backward pass.
//!
//! ```text
//! h₀ = W_in·x + b_in
//! h_{k+1} = h_k + dropout(GELU(W_k·LN_k(h_k) + b_k))
//! y = W_out·LN_out(h_B) + b_out
//! ```
//!
//! All parameters live in one flat buffer so the optimizer can treat them as
//! a single vector. Generic over the float type: models run in `f32`, the
//! gradient check runs in `f64`.

use std::ops::Range;

use ndarray::linalg::{general_mat_mul, general_mat_vec_mul};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

pub trait Real:
    Float
    + num_traits::NumAssign
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    /// tanh, possibly approximated.
    fn tanh_fast(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    #[inline(always)]
    fn tanh_fast(self) -> f32 {
        // 13/6 rational approximation, accurate to a few ulp on the clamp range.
        let x = self.clamp(-7.905_311, 7.905_311);
        let x2 = x * x;
        let p = -2.760_768_5e-16 * x2 + 2.000_187_9e-13;
        let p = p * x2 - 8.604_672e-11;
        let p = p * x2 + 5.122_297e-8;
        let p = p * x2 + 1.485_722_4e-5;
        let p = p * x2 + 6.372_619_3e-4;
        let p = p * x2 + 4.893_524_6e-3;
        let q = 1.198_258_4e-6 * x2 + 1.185_347_1e-4;
        let q = q * x2 + 2.268_434_6e-3;
        let q = q * x2 + 4.893_525_2e-3;
        x * p / q
    }
}

impl Real for f64 {
    #[inline(always)]
    fn tanh_fast(self) -> f64 {
        self.tanh()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

#[inline(always)]
fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh_fast())
}

#[inline(always)]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh_fast();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub width: usize,
    pub blocks: usize,
    pub output: usize,
}

/// Offsets of one parameter tensor inside the flat buffer.
#[derive(Debug, Clone)]
struct Slot {
    range: Range<usize>,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    ln_gain: Slot,
    ln_bias: Slot,
    weight: Slot,
    bias: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    in_weight: Slot,
    in_bias: Slot,
    blocks: Vec<BlockSlots>,
    out_ln_gain: Slot,
    out_ln_bias: Slot,
    out_weight: Slot,
    out_bias: Slot,
    len: usize,
}

impl Layout {
    fn new(a: Arch) -> Layout {
        let mut at = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot {
                range: at..at + rows * cols,
                rows,
                cols,
            };
            at += rows * cols;
            s
        };
        let in_weight = slot(a.width, a.input);
        let in_bias = slot(1, a.width);
        let blocks = (0..a.blocks)
            .map(|_| BlockSlots {
                ln_gain: slot(1, a.width),
                ln_bias: slot(1, a.width),
                weight: slot(a.width, a.width),
                bias: slot(1, a.width),
            })
            .collect();
        let out_ln_gain = slot(1, a.width);
        let out_ln_bias = slot(1, a.width);
        let out_weight = slot(a.output, a.width);
        let out_bias = slot(1, a.output);
        Layout {
            in_weight,
            in_bias,
            blocks,
            out_ln_gain,
            out_ln_bias,
            out_weight,
            out_bias,
            len: at,
        }
    }
}

fn mat<'a, T>(p: &'a [T], s: &Slot) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((s.rows, s.cols), &p[s.range.clone()]).unwrap()
}

fn vec1<'a, T>(p: &'a [T], s: &Slot) -> ArrayView1<'a, T> {
    ArrayView1::from(&p[s.range.clone()])
}

fn mat_mut<'a, T>(p: &'a mut [T], s: &Slot) -> ArrayViewMut2<'a, T> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut p[s.range.clone()]).unwrap()
}

fn vec1_mut<'a, T>(p: &'a mut [T], s: &Slot) -> ArrayViewMut1<'a, T> {
    ArrayViewMut1::from(&mut p[s.range.clone()])
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: Arch,
    layout: Layout,
    params: Vec<T>,
}

impl<T: PartialEq> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Per-layer-norm statistics kept for the backward pass.
struct NormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct BlockCache<T> {
    norm: NormCache<T>,
    /// LN output (the linear layer's input).
    u: Array2<T>,
    /// Pre-activation.
    v: Array2<T>,
    /// Dropout keep mask already divided by the keep probability.
    mask: Option<Array2<T>>,
}

pub struct Cache<T> {
    x: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    out_norm: NormCache<T>,
    out_u: Array2<T>,
}

fn layer_norm<T: Real>(h: &ArrayView2<T>, gain: ArrayView1<T>, bias: ArrayView1<T>) -> (Array2<T>, NormCache<T>) {
    let n = T::from_usize(h.ncols()).unwrap();
    let eps = T::lit(LN_EPS);
    let mut xhat = h.to_owned();
    let mut rstd = Array1::zeros(h.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<T>() / n;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut u = xhat.clone();
    Zip::from(u.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(&gain).and(&bias).for_each(|v, &g, &b| *v = *v * g + b);
    });
    (u, NormCache { xhat, rstd })
}

fn add_rows<T: Real>(m: &mut Array2<T>, bias: &[T]) {
    for row in m.as_slice_mut().unwrap().chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Batched inference runs in row tiles of this size so activations stay in cache.
const ROW_TILE: usize = 256;

/// Sum of `f` over `x` in eight independent lanes so the loop vectorizes.
#[inline(always)]
fn lane_sum<T: Real>(x: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] = acc[i] + f(c[i]);
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + f(v));
    acc.iter().fold(tail, |a, &v| a + v)
}

/// Row-wise layer norm of a standard-layout matrix into `out`.
fn normalize_into<T: Real>(h: &Array2<T>, gain: &[T], bias: &[T], out: &mut Array2<T>) {
    let w = gain.len();
    let rows = h.as_slice().unwrap().chunks_exact(w);
    for (x, o) in rows.zip(out.as_slice_mut().unwrap().chunks_exact_mut(w)) {
        normalize_row(x, gain, bias, o);
    }
}

#[inline(always)]
fn normalize_row<T: Real>(x: &[T], gain: &[T], bias: &[T], o: &mut [T]) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = lane_sum(x, |v| v) / n;
    let var = lane_sum(x, |v| (v - mean) * (v - mean)) / n;
    let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for (((o, &v), &g), &b) in o.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * r * g + b;
    }
}

/// Gradient through `xhat = (h − mean)·rstd` given `dxhat`.
fn layer_norm_back<T: Real>(cache: &NormCache<T>, dxhat: &Array2<T>) -> Array2<T> {
    let n = T::from_usize(dxhat.ncols()).unwrap();
    let mut dh = Array2::zeros(dxhat.raw_dim());
    Zip::from(dh.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut out, d, xh, &r| {
            let md = d.sum() / n;
            let mdx = d.iter().zip(xh.iter()).map(|(a, b)| *a * *b).sum::<T>() / n;
            Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &di, &xi| {
                *o = r * (di - md - xi * mdx);
            });
        });
    dh
}

impl<T: Real> Network<T> {
    /// He-style uniform init for hidden layers, zero output layer, unit
    /// layer-norm gains.
    pub fn new(arch: Arch, rng: &mut impl Rng) -> Self {
        let layout = Layout::new(arch);
        let mut params = vec![T::zero(); layout.len];
        let mut init = |p: &mut [T], s: &Slot, fan_in: usize| {
            let bound = (3.0 / fan_in as f64).sqrt();
            for v in &mut p[s.range.clone()] {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        };
        init(&mut params, &layout.in_weight, arch.input);
        for b in &layout.blocks {
            init(&mut params, &b.weight, arch.width);
            params[b.ln_gain.range.clone()].fill(T::one());
        }
        params[layout.out_ln_gain.range.clone()].fill(T::one());
        Network { arch, layout, params }
    }

    pub fn from_params(arch: Arch, params: Vec<T>) -> Option<Self> {
        let layout = Layout::new(arch);
        (params.len() == layout.len).then_some(Network { arch, layout, params })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    /// Inference forward pass, no dropout. `x` is `batch × input`.
    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        if x.nrows() == 1 {
            let y = self.forward_row(x.row(0));
            return y.insert_axis(Axis(0));
        }
        if x.nrows() <= ROW_TILE {
            return self.forward_tile(x);
        }
        let mut y = Array2::zeros((x.nrows(), self.arch.output));
        for (xs, mut ys) in x.axis_chunks_iter(Axis(0), ROW_TILE).zip(y.axis_chunks_iter_mut(Axis(0), ROW_TILE)) {
            ys.assign(&self.forward_tile(&xs));
        }
        y
    }

    /// One input through matrix-vector products; avoids GEMM packing cost.
    fn forward_row(&self, x: ArrayView1<T>) -> Array1<T> {
        let p = &self.params;
        let l = &self.layout;
        let w = self.arch.width;
        let mut h = vec1(p, &l.in_bias).to_owned();
        general_mat_vec_mul(T::one(), &mat(p, &l.in_weight), &x, T::one(), &mut h);
        let mut u = Array2::zeros((1, w));
        let mut v = Array1::zeros(w);
        for b in &l.blocks {
            normalize_row(h.as_slice().unwrap(), &p[b.ln_gain.range.clone()], &p[b.ln_bias.range.clone()], u.as_slice_mut().unwrap());
            v.assign(&vec1(p, &b.bias));
            general_mat_vec_mul(T::one(), &mat(p, &b.weight), &u.row(0), T::one(), &mut v);
            for (hv, &vv) in h.iter_mut().zip(v.iter()) {
                *hv += gelu(vv);
            }
        }
        normalize_row(h.as_slice().unwrap(), &p[l.out_ln_gain.range.clone()], &p[l.out_ln_bias.range.clone()], u.as_slice_mut().unwrap());
        let mut y = vec1(p, &l.out_bias).to_owned();
        general_mat_vec_mul(T::one(), &mat(p, &l.out_weight), &u.row(0), T::one(), &mut y);
        y
    }

    fn forward_tile(&self, x: &ArrayView2<T>) -> Array2<T> {
        let p = &self.params;
        let l = &self.layout;
        let (n, w) = (x.nrows(), self.arch.width);
        let mut h = Array2::zeros((n, w));
        general_mat_mul(T::one(), x, &mat(p, &l.in_weight).t(), T::zero(), &mut h);
        add_rows(&mut h, &p[l.in_bias.range.clone()]);
        let mut u = Array2::zeros((n, w));
        let mut v = Array2::zeros((n, w));
        for b in &l.blocks {
            normalize_into(&h, &p[b.ln_gain.range.clone()], &p[b.ln_bias.range.clone()], &mut u);
            general_mat_mul(T::one(), &u, &mat(p, &b.weight).t(), T::zero(), &mut v);
            let bias = &p[b.bias.range.clone()];
            let hs = h.as_slice_mut().unwrap();
            for (hr, vr) in hs.chunks_exact_mut(w).zip(v.as_slice().unwrap().chunks_exact(w)) {
                for ((hv, &vv), &bb) in hr.iter_mut().zip(vr).zip(bias) {
                    *hv += gelu(vv + bb);
                }
            }
        }
        normalize_into(&h, &p[l.out_ln_gain.range.clone()], &p[l.out_ln_bias.range.clone()], &mut u);
        let mut y = Array2::zeros((n, self.arch.output));
        general_mat_mul(T::one(), &u, &mat(p, &l.out_weight).t(), T::zero(), &mut y);
        add_rows(&mut y, &p[l.out_bias.range.clone()]);
        y
    }

    /// Training forward pass; keeps activations and applies dropout with
    /// rate `dropout` when `rng` is given.
    pub fn forward_train(
        &self,
        x: &ArrayView2<T>,
        dropout: f64,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> (Array2<T>, Cache<T>) {
        let p = &self.params;
        let l = &self.layout;
        let mut h = x.dot(&mat(p, &l.in_weight).t()) + &vec1(p, &l.in_bias);
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let (u, norm) = layer_norm(&h.view(), vec1(p, &b.ln_gain), vec1(p, &b.ln_bias));
            let v = u.dot(&mat(p, &b.weight).t()) + &vec1(p, &b.bias);
            let mut a = v.mapv(gelu);
            let mask = match (&mut rng, dropout > 0.0) {
                (Some(r), true) => {
                    let keep = T::lit(1.0 / (1.0 - dropout));
                    let m = Array2::from_shape_fn(a.raw_dim(), |_| {
                        if r.random::<f64>() < dropout {
                            T::zero()
                        } else {
                            keep
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &a;
            blocks.push(BlockCache { norm, u, v, mask });
        }
        let (out_u, out_norm) = layer_norm(&h.view(), vec1(p, &l.out_ln_gain), vec1(p, &l.out_ln_bias));
        let y = out_u.dot(&mat(p, &l.out_weight).t()) + &vec1(p, &l.out_bias);
        (
            y,
            Cache {
                x: x.to_owned(),
                blocks,
                out_norm,
                out_u,
            },
        )
    }

    /// Accumulates `∂L/∂θ` into `grad` given `dy = ∂L/∂y`.
    pub fn backward(&self, cache: &Cache<T>, dy: &Array2<T>, grad: &mut [T]) {
        let p = &self.params;
        let l = &self.layout;

        mat_mut(grad, &l.out_weight).scaled_add(T::one(), &dy.t().dot(&cache.out_u));
        vec1_mut(grad, &l.out_bias).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
        let du = dy.dot(&mat(p, &l.out_weight));
        let mut dh = self.norm_affine_back(&cache.out_norm, &du, &l.out_ln_gain, &l.out_ln_bias, grad);

        for (b, c) in l.blocks.iter().zip(&cache.blocks).rev() {
            let mut dv = match &c.mask {
                Some(m) => &dh * m,
                None => dh.clone(),
            };
            Zip::from(&mut dv).and(&c.v).for_each(|d, &v| *d = *d * gelu_grad(v));
            mat_mut(grad, &b.weight).scaled_add(T::one(), &dv.t().dot(&c.u));
            vec1_mut(grad, &b.bias).scaled_add(T::one(), &dv.sum_axis(Axis(0)));
            let du = dv.dot(&mat(p, &b.weight));
            dh += &self.norm_affine_back(&c.norm, &du, &b.ln_gain, &b.ln_bias, grad);
        }

        mat_mut(grad, &l.in_weight).scaled_add(T::one(), &dh.t().dot(&cache.x));
        vec1_mut(grad, &l.in_bias).scaled_add(T::one(), &dh.sum_axis(Axis(0)));
    }

    fn norm_affine_back(&self, c: &NormCache<T>, du: &Array2<T>, gain: &Slot, bias: &Slot, grad: &mut [T]) -> Array2<T> {
        let g = vec1(&self.params, gain);
        vec1_mut(grad, gain).scaled_add(T::one(), &(du * &c.xhat).sum_axis(Axis(0)));
        vec1_mut(grad, bias).scaled_add(T::one(), &du.sum_axis(Axis(0)));
        let dxhat = du * &g;
        layer_norm_back(c, &dxhat)
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    /// Output-layer parameters are zero (the untrained state).
    pub fn output_is_zero(&self) -> bool {
        let l = &self.layout;
        self.params[l.out_weight.range.clone()]
            .iter()
            .chain(&self.params[l.out_bias.range.clone()])
            .all(|v| *v == T::zero())
    }

    /// Shapes `(rows, cols)` of every parameter tensor in buffer order.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let l = &self.layout;
        let mut v = vec![(l.in_weight.rows, l.in_weight.cols), (1, l.in_bias.cols)];
        for b in &l.blocks {
            for s in [&b.ln_gain, &b.ln_bias, &b.weight, &b.bias] {
                v.push((s.rows, s.cols));
            }
        }
        for s in [&l.out_ln_gain, &l.out_ln_bias, &l.out_weight, &l.out_bias] {
            v.push((s.rows, s.cols));
        }
        v
    }

    /// A one-row batch view of a single input vector.
    pub fn single(x: &[T]) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((1, x.len()), x).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini(seed: u64) -> Network<f64> {
        let arch = Arch {
            input: 5,
            width: 8,
            blocks: 2,
            output: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f64>::new(arch, &mut rng);
        // Non-trivial values everywhere, including the zero-initialised output.
        for v in net.params_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        net
    }

    fn loss(net: &Network<f64>, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let y = net.forward(&x.view());
        (&y - t).mapv(|v| v * v).sum() / y.len() as f64
    }

    #[test]
    fn fast_tanh_is_accurate() {
        let mut worst: f32 = 0.0;
        for i in -4000..=4000 {
            let x = i as f32 * 0.0025;
            worst = worst.max((x.tanh_fast() - x.tanh()).abs());
        }
        assert!(worst < 2e-6, "{worst}");
        assert_eq!(20.0f32.tanh_fast(), 1.0);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let net = mini(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((10, 5), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((10, 3), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = net.forward_train(&x.view(), 0.0, None);
        let dy = (&y - &t) * (2.0 / y.len() as f64);
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&cache, &dy, &mut grad);

        let h = 1e-5;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus, &x, &t) - loss(&minus, &x, &t)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(err < 1e-4 || (fd - grad[i]).abs() < 1e-9, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn train_and_inference_forward_agree() {
        let net = mini(3);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i as f64 - j as f64) * 0.1);
        let (y, _) = net.forward_train(&x.view(), 0.0, None);
        let y2 = net.forward(&x.view());
        assert!((&y - &y2).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn single_row_and_tiled_paths_match_training_forward() {
        let net = mini(2);
        let x = Array2::from_shape_fn((ROW_TILE * 2 + 3, 5), |(i, j)| ((i * 7 + j) % 13) as f64 * 0.1 - 0.6);
        let (y, _) = net.forward_train(&x.view(), 0.0, None);
        assert!((&y - &net.forward(&x.view())).iter().all(|d| d.abs() < 1e-12));
        for i in [0, ROW_TILE, ROW_TILE * 2 + 2] {
            let one = net.forward(&x.slice(ndarray::s![i..i + 1, ..]));
            assert!((&y.row(i) - &one.row(0)).iter().all(|d| d.abs() < 1e-12));
        }
    }
}
