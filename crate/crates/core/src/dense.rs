//! Dense 3D tensors and reference implementations of every network operation.
//!
//! These are the oracles the grid-octree operations are checked against, so
//! they are written as plain index loops with no shared code paths.

use crate::error::{Error, Result};

/// A `C × X × Y × Z` tensor, row-major with channels outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    channels: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        DenseTensor {
            channels,
            shape,
            data: vec![0.0; channels * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(channels: usize, shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) || channels == 0 {
            return Err(Error::ShapeMismatch {
                expected: "positive channel count and extents".into(),
                actual: format!("C={channels}, shape={shape:?}"),
            });
        }
        let expected = channels * shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(DenseTensor {
            channels,
            shape,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        shape: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(channels, shape);
        for c in 0..channels {
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    for k in 0..shape[2] {
                        let idx = t.index(c, i, j, k);
                        t.data[idx] = f(c, i, j, k);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.shape[0] + i) * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(c, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(c, i, j, k);
        self.data[idx] = v;
    }

    /// Value at a possibly out-of-range coordinate; outside reads zero.
    #[inline]
    fn at_padded(&self, c: usize, i: isize, j: isize, k: isize) -> f32 {
        let [x, y, z] = self.shape;
        if i < 0 || j < 0 || k < 0 || i as usize >= x || j as usize >= y || k as usize >= z {
            0.0
        } else {
            self.at(c, i as usize, j as usize, k as usize)
        }
    }

    /// Copy of a single channel as a one-channel tensor.
    pub fn channel(&self, c: usize) -> Result<DenseTensor> {
        if c >= self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: c,
            });
        }
        let n = self.shape[0] * self.shape[1] * self.shape[2];
        Ok(DenseTensor {
            channels: 1,
            shape: self.shape,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        })
    }

    /// Channel-wise concatenation, `self` first.
    pub fn concat(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", other.shape),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(DenseTensor {
            channels: self.channels + other.channels,
            shape: self.shape,
            data,
        })
    }
}

/// Convolution weights `W[c_out][c_in][l][m][n]` with a per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    dims: [usize; 3],
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        dims: [usize; 3],
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d % 2 == 0) {
            return Err(Error::InvalidKernel(format!(
                "spatial dims must be odd and positive, got {dims:?}"
            )));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidKernel("channel counts must be positive".into()));
        }
        let expected = out_channels * in_channels * dims[0] * dims[1] * dims[2];
        if weights.len() != expected {
            return Err(Error::InvalidKernel(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidKernel(format!(
                "expected {out_channels} biases, got {}",
                bias.len()
            )));
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            dims,
            weights,
            bias,
        })
    }

    /// Kernel that copies each channel to itself, with zero bias.
    pub fn identity(channels: usize, dims: [usize; 3]) -> Result<Self> {
        let taps = dims[0] * dims[1] * dims[2];
        let center = ((dims[0] / 2) * dims[1] + dims[1] / 2) * dims[2] + dims[2] / 2;
        let mut weights = vec![0.0; channels * channels * taps];
        for c in 0..channels {
            weights[(c * channels + c) * taps + center] = 1.0;
        }
        Self::new(channels, channels, dims, weights, vec![0.0; channels])
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn taps(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, l: usize, m: usize, n: usize) -> f32 {
        let [_, mm, nn] = self.dims;
        self.weights[(((co * self.in_channels + ci) * self.dims[0] + l) * mm + m) * nn + n]
    }

    /// Weights for one `(c_out, c_in)` pair in `(l, m, n)` order.
    #[inline]
    pub fn taps_for(&self, co: usize, ci: usize) -> &[f32] {
        let taps = self.taps();
        let start = (co * self.in_channels + ci) * taps;
        &self.weights[start..start + taps]
    }
}

/// Stride-1, zero-padded 3D convolution.
///
/// Sums run bias first, then `c_in`, then `l, m, n`, in f64.
pub fn conv(t: &DenseTensor, kernel: &ConvKernel) -> Result<DenseTensor> {
    if t.channels != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_channels,
            actual: t.channels,
        });
    }
    let [lx, my, nz] = kernel.dims;
    let (hl, hm, hn) = ((lx / 2) as isize, (my / 2) as isize, (nz / 2) as isize);
    let mut out = DenseTensor::zeros(kernel.out_channels, t.shape);
    for co in 0..kernel.out_channels {
        for i in 0..t.shape[0] {
            for j in 0..t.shape[1] {
                for k in 0..t.shape[2] {
                    let mut acc = kernel.bias[co] as f64;
                    for ci in 0..kernel.in_channels {
                        for l in 0..lx {
                            for m in 0..my {
                                for n in 0..nz {
                                    let v = t.at_padded(
                                        ci,
                                        i as isize - l as isize + hl,
                                        j as isize - m as isize + hm,
                                        k as isize - n as isize + hn,
                                    );
                                    acc += kernel.weight(co, ci, l, m, n) as f64 * v as f64;
                                }
                            }
                        }
                    }
                    out.set(co, i, j, k, acc as f32);
                }
            }
        }
    }
    Ok(out)
}

fn halved_shape(t: &DenseTensor) -> Result<[usize; 3]> {
    if t.shape.iter().any(|s| s % 2 != 0) {
        return Err(Error::ShapeMismatch {
            expected: "even spatial dims".into(),
            actual: format!("{:?}", t.shape),
        });
    }
    Ok([t.shape[0] / 2, t.shape[1] / 2, t.shape[2] / 2])
}

/// Strided 2³ max pooling.
pub fn max_pool2(t: &DenseTensor) -> Result<DenseTensor> {
    let shape = halved_shape(t)?;
    Ok(DenseTensor::from_fn(t.channels, shape, |c, i, j, k| {
        let mut best = f32::NEG_INFINITY;
        for l in 0..2 {
            for m in 0..2 {
                for n in 0..2 {
                    let v = t.at(c, 2 * i + l, 2 * j + m, 2 * k + n);
                    if v > best {
                        best = v;
                    }
                }
            }
        }
        best
    }))
}

/// Strided 2³ average pooling.
pub fn avg_pool2(t: &DenseTensor) -> Result<DenseTensor> {
    let shape = halved_shape(t)?;
    Ok(DenseTensor::from_fn(t.channels, shape, |c, i, j, k| {
        let mut sum = 0.0f64;
        for l in 0..2 {
            for m in 0..2 {
                for n in 0..2 {
                    sum += t.at(c, 2 * i + l, 2 * j + m, 2 * k + n) as f64;
                }
            }
        }
        (sum / 8.0) as f32
    }))
}

/// Nearest-neighbour 2³ unpooling.
pub fn unpool2(t: &DenseTensor) -> DenseTensor {
    let shape = [t.shape[0] * 2, t.shape[1] * 2, t.shape[2] * 2];
    DenseTensor::from_fn(t.channels, shape, |c, i, j, k| t.at(c, i / 2, j / 2, k / 2))
}

pub fn pointwise(t: &DenseTensor, f: impl Fn(f32) -> f32) -> DenseTensor {
    DenseTensor {
        channels: t.channels,
        shape: t.shape,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3]) -> DenseTensor {
        DenseTensor::from_fn(c, shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize, dims: [usize; 3]) -> ConvKernel {
        let n = co * ci * dims.iter().product::<usize>();
        ConvKernel::new(
            co,
            ci,
            dims,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 2, [4, 5, 3]);
        let k = ConvKernel::identity(2, [1, 1, 1]).unwrap();
        assert_eq!(conv(&t, &k).unwrap(), t);
        let k3 = ConvKernel::identity(2, [3, 3, 3]).unwrap();
        assert_eq!(conv(&t, &k3).unwrap(), t);
    }

    #[test]
    fn impulse_response_of_ones_kernel() {
        let mut t = DenseTensor::zeros(1, [5, 5, 5]);
        t.set(0, 0, 2, 2, 1.0);
        let k = ConvKernel::new(1, 1, [3, 3, 3], vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv(&t, &k).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                for kk in 0..5 {
                    let inside = i <= 1 && (1..=3).contains(&j) && (1..=3).contains(&kk);
                    assert_eq!(out.at(0, i, j, kk), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn conv_matches_unstructured_summation() {
        // Brute force: scatter every input voxel through every tap.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(&mut rng, 2, [5, 5, 5]);
        let k = random_kernel(&mut rng, 3, 2, [3, 3, 3]);
        let out = conv(&t, &k).unwrap();
        let mut expected = vec![0.0f64; 3 * 125];
        for co in 0..3 {
            for v in expected[co * 125..(co + 1) * 125].iter_mut() {
                *v = k.bias()[co] as f64;
            }
            for ci in 0..2 {
                for (si, sj, sk) in itertools_product(5) {
                    let x = t.at(ci, si, sj, sk) as f64;
                    for l in 0..3 {
                        for m in 0..3 {
                            for n in 0..3 {
                                // input index = out - l + 1  =>  out = in + l - 1
                                let (oi, oj, ok) = (si + l, sj + m, sk + n);
                                if oi < 1 || oj < 1 || ok < 1 || oi > 5 || oj > 5 || ok > 5 {
                                    continue;
                                }
                                let idx = co * 125 + (oi - 1) * 25 + (oj - 1) * 5 + (ok - 1);
                                expected[idx] += k.weight(co, ci, l, m, n) as f64 * x;
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    fn itertools_product(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        (0..n).flat_map(move |i| (0..n).flat_map(move |j| (0..n).map(move |k| (i, j, k))))
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, 2, [6, 6, 6]);
        let b = random_tensor(&mut rng, 2, [6, 6, 6]);
        let mut k = random_kernel(&mut rng, 2, 2, [3, 3, 3]);
        k.bias = vec![0.0; 2];
        let (alpha, beta) = (0.75f32, -1.5f32);
        let mix = DenseTensor::from_fn(2, [6, 6, 6], |c, i, j, kk| {
            alpha * a.at(c, i, j, kk) + beta * b.at(c, i, j, kk)
        });
        let lhs = conv(&mix, &k).unwrap();
        let ca = conv(&a, &k).unwrap();
        let cb = conv(&b, &k).unwrap();
        let scale = lhs.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for idx in 0..lhs.data().len() {
            let rhs = alpha * ca.data()[idx] + beta * cb.data()[idx];
            assert!((lhs.data()[idx] - rhs).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn conv_is_translation_equivariant_away_from_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 1, 1, [3, 3, 3]);
        let mut a = DenseTensor::zeros(1, [9, 9, 9]);
        a.set(0, 3, 3, 3, 1.0);
        let mut b = DenseTensor::zeros(1, [9, 9, 9]);
        b.set(0, 5, 4, 3, 1.0);
        let (oa, ob) = (conv(&a, &k).unwrap(), conv(&b, &k).unwrap());
        for i in 2..5 {
            for j in 2..5 {
                for kk in 2..5 {
                    assert_eq!(oa.at(0, i, j, kk), ob.at(0, i + 2, j + 1, kk));
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let t = DenseTensor::zeros(2, [2, 2, 2]);
        let k = ConvKernel::identity(3, [1, 1, 1]).unwrap();
        assert!(matches!(conv(&t, &k), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn kernel_rejects_even_dims() {
        assert!(ConvKernel::new(1, 1, [2, 3, 3], vec![0.0; 18], vec![0.0]).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let c = DenseTensor::from_fn(1, [4, 4, 2], |_, _, _, _| 3.0);
        let p = max_pool2(&c).unwrap();
        assert_eq!(p.shape(), [2, 2, 1]);
        assert!(p.data().iter().all(|&v| v == 3.0));

        let t = DenseTensor::from_vec(1, [2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(max_pool2(&t).unwrap().data(), &[8.0]);
        assert_eq!(avg_pool2(&t).unwrap().data(), &[4.5]);
        assert!(max_pool2(&DenseTensor::zeros(1, [3, 2, 2])).is_err());
    }

    #[test]
    fn max_pool_matches_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 2, [8, 8, 8]);
        let p = max_pool2(&t).unwrap();
        for c in 0..2 {
            for (i, j, k) in itertools_product(4) {
                let block: Vec<f32> = itertools_product(2)
                    .map(|(l, m, n)| t.at(c, 2 * i + l, 2 * j + m, 2 * k + n))
                    .collect();
                let best = block.iter().cloned().fold(f32::MIN, f32::max);
                assert_eq!(p.at(c, i, j, k), best);
            }
        }
    }

    #[test]
    fn unpool_examples() {
        let t = DenseTensor::from_vec(1, [1, 1, 1], vec![2.5]).unwrap();
        let u = unpool2(&t);
        assert_eq!(u.shape(), [2, 2, 2]);
        assert!(u.data().iter().all(|&v| v == 2.5));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tensor(&mut rng, 1, [4, 4, 4]);
        let u = unpool2(&t);
        for (i, j, k) in itertools_product(8) {
            assert_eq!(u.at(0, i, j, k), t.data()[(i >> 1) * 16 + (j >> 1) * 4 + (k >> 1)]);
        }
        // Pooling a blockwise constant tensor and unpooling restores it.
        assert_eq!(unpool2(&max_pool2(&u).unwrap()), u);
    }

    #[test]
    fn pointwise_relu() {
        let neg = DenseTensor::from_fn(1, [2, 2, 2], |_, i, j, k| -1.0 - (i + j + k) as f32);
        assert!(pointwise(&neg, relu).data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, 1, [3, 3, 3]);
        assert_eq!(pointwise(&t, |x| x), t);
        let pos = pointwise(&t, relu);
        let negp = pointwise(&t, |x| relu(-x));
        for idx in 0..t.data().len() {
            assert_eq!(pos.data()[idx] + negp.data()[idx], t.data()[idx].abs());
        }
    }

    #[test]
    fn max_pool_commutes_with_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, 1, [4, 4, 4]);
        let f = |x: f32| relu(x) * 2.0 + 1.0;
        assert_eq!(
            max_pool2(&pointwise(&t, f)).unwrap(),
            pointwise(&max_pool2(&t).unwrap(), f)
        );
    }
}
