//! Host implementations of the standard CNN layers.
//!
//! These serve two roles: they are the executors for layers that run on the
//! host, and `direct_conv` is the ground truth the Winograd engine is checked
//! against.

use thiserror::Error;

use crate::tensor::{Shape, Tensor4D, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("input has {input} channels but weights expect {weights}")]
    ChannelMismatch { input: usize, weights: usize },
    #[error("invalid layer parameters: {0}")]
    InvalidSpec(String),
    #[error("window {window}x{window} does not fit a {h}x{w} input")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("weight matrix has {cols} columns but input flattens to {features}")]
    FeatureMismatch { cols: usize, features: usize },
    #[error("bias has {got} entries, expected {expected}")]
    BiasLength { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// 3×3, stride 1, pad 1: the shape-preserving convolution.
    pub const fn same3x3(out_channels: usize) -> Self {
        Self {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 1,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.out_channels == 0 {
            return Err(LayerError::InvalidSpec(format!("{self:?}")));
        }
        Ok(())
    }

    /// Output shape for an input of shape `s`, or an error if the kernel does not fit.
    pub fn output_shape(&self, s: Shape) -> Result<Shape, LayerError> {
        self.validate()?;
        let (ph, pw) = (s.h + 2 * self.pad, s.w + 2 * self.pad);
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(LayerError::InvalidSpec(format!(
                "{}x{} kernel larger than padded {}x{} input",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok(Shape::new(
            s.n,
            self.out_channels,
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolSpec {
    pub fn output_shape(&self, s: Shape) -> Result<Shape, LayerError> {
        if self.window == 0 || self.stride == 0 {
            return Err(LayerError::InvalidSpec(format!("{self:?}")));
        }
        if self.window > s.h || self.window > s.w {
            return Err(LayerError::WindowTooLarge {
                window: self.window,
                h: s.h,
                w: s.w,
            });
        }
        Ok(Shape::new(
            s.n,
            s.c,
            (s.h - self.window) / self.stride + 1,
            (s.w - self.window) / self.stride + 1,
        ))
    }
}

/// Row-major dense matrix used for fully connected weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LayerError> {
        if data.len() != rows * cols {
            return Err(LayerError::InvalidSpec(format!(
                "matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    /// Fully connected weights stored as an `out × in × 1 × 1` tensor.
    pub fn from_tensor(t: &Tensor4D) -> Self {
        let s = t.shape();
        Self {
            rows: s.n,
            cols: s.image_len(),
            data: t.data().to_vec(),
        }
    }
}

fn check_bias(bias: Option<&[f32]>, expected: usize) -> Result<(), LayerError> {
    match bias {
        Some(b) if b.len() != expected => Err(LayerError::BiasLength {
            got: b.len(),
            expected,
        }),
        _ => Ok(()),
    }
}

/// Direct (cross-correlation) convolution with zero padding.
///
/// Out-of-bounds input reads are zero. Weights are `k × c × kh × kw`.
pub fn direct_conv(
    input: &Tensor4D,
    weights: &Tensor4D,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<Tensor4D, LayerError> {
    let s = input.shape();
    let ws = weights.shape();
    if ws.c != s.c {
        return Err(LayerError::ChannelMismatch {
            input: s.c,
            weights: ws.c,
        });
    }
    if ws.n != spec.out_channels || ws.h != spec.kernel_h || ws.w != spec.kernel_w {
        return Err(LayerError::InvalidSpec(format!(
            "weights {ws} do not match {spec:?}"
        )));
    }
    check_bias(bias, spec.out_channels)?;
    let os = spec.output_shape(s)?;
    let mut out = Tensor4D::zeros(os)?;
    let (kh, kw, stride, pad) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.pad as isize);
    let plane = os.plane_len();

    for i in 0..s.n {
        for k in 0..os.c {
            let base = out.offset(i, k, 0, 0);
            let dst = &mut out.data_mut()[base..base + plane];
            if let Some(b) = bias {
                dst.fill(b[k]);
            }
            for c in 0..s.c {
                let src = input.plane(i, c);
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = weights.data()[((k * s.c + c) * kh + u) * kw + v];
                        for y in 0..os.h {
                            let iy = (y * stride) as isize - pad + u as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                            let out_row = &mut dst[y * os.w..(y + 1) * os.w];
                            for (x, o) in out_row.iter_mut().enumerate() {
                                let ix = (x * stride) as isize - pad + v as isize;
                                if ix >= 0 && ix < s.w as isize {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor4D) -> Tensor4D {
    let mut out = input.clone();
    relu_in_place(out.data_mut());
    out
}

pub fn relu_in_place(data: &mut [f32]) {
    for v in data {
        *v = v.max(0.0);
    }
}

/// Sliding-window max or average pooling without padding.
///
/// Average pooling always divides by the full window area.
pub fn pool(input: &Tensor4D, spec: &PoolSpec) -> Result<Tensor4D, LayerError> {
    let s = input.shape();
    let os = spec.output_shape(s)?;
    let mut out = Vec::with_capacity(os.len());
    for i in 0..s.n {
        for c in 0..s.c {
            pool_plane_rows(input.plane(i, c), s.w, spec, os.w, 0..os.h, &mut out);
        }
    }
    Ok(Tensor4D::from_vec(os, out)?)
}

/// Pool output rows `rows` of one plane whose rows are `in_w` wide, appending to `out`.
pub(crate) fn pool_plane_rows(
    plane: &[f32],
    in_w: usize,
    spec: &PoolSpec,
    out_w: usize,
    rows: std::ops::Range<usize>,
    out: &mut Vec<f32>,
) {
    let area = (spec.window * spec.window) as f32;
    for y in rows {
        for x in 0..out_w {
            let (y0, x0) = (y * spec.stride, x * spec.stride);
            let mut acc = match spec.mode {
                PoolMode::Max => f32::NEG_INFINITY,
                PoolMode::Average => 0.0,
            };
            for dy in 0..spec.window {
                let row = &plane[(y0 + dy) * in_w + x0..(y0 + dy) * in_w + x0 + spec.window];
                for &v in row {
                    match spec.mode {
                        PoolMode::Max => acc = acc.max(v),
                        PoolMode::Average => acc += v,
                    }
                }
            }
            if spec.mode == PoolMode::Average {
                acc /= area;
            }
            out.push(acc);
        }
    }
}

/// `W · flatten(x) + b` per image; output is `n × rows × 1 × 1`.
pub fn fully_connected(
    input: &Tensor4D,
    weights: &Matrix,
    bias: Option<&[f32]>,
) -> Result<Tensor4D, LayerError> {
    let s = input.shape();
    if weights.cols != s.image_len() {
        return Err(LayerError::FeatureMismatch {
            cols: weights.cols,
            features: s.image_len(),
        });
    }
    check_bias(bias, weights.rows)?;
    let mut out = Vec::with_capacity(s.n * weights.rows);
    for i in 0..s.n {
        let x = input.image(i);
        for (r, row) in weights.data.chunks_exact(weights.cols).enumerate() {
            let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + bias.map_or(0.0, |b| b[r]));
        }
    }
    Ok(Tensor4D::from_vec(Shape::new(s.n, weights.rows, 1, 1), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4D {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor4D::from_vec(shape, data).unwrap()
    }

    /// Scalar quadruple loop written independently of `direct_conv`.
    fn brute_force_conv(x: &Tensor4D, w: &Tensor4D, b: Option<&[f32]>, spec: &ConvSpec) -> Tensor4D {
        let s = x.shape();
        let ws = w.shape();
        let oh = (s.h + 2 * spec.pad - ws.h) / spec.stride + 1;
        let ow = (s.w + 2 * spec.pad - ws.w) / spec.stride + 1;
        let mut out = Tensor4D::zeros(Shape::new(s.n, ws.n, oh, ow)).unwrap();
        for i in 0..s.n {
            for k in 0..ws.n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[k]);
                        for c in 0..s.c {
                            for u in 0..ws.h {
                                for v in 0..ws.w {
                                    let iy = (y * spec.stride + u) as i64 - spec.pad as i64;
                                    let ix = (xx * spec.stride + v) as i64 - spec.pad as i64;
                                    if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                        continue;
                                    }
                                    acc += x.at(i, c, iy as usize, ix as usize).unwrap()
                                        * w.at(k, c, u, v).unwrap();
                                }
                            }
                        }
                        out.set(i, k, y, xx, acc).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_input_picks_center_weight() {
        let mut x = Tensor4D::zeros(Shape::new(1, 1, 3, 3)).unwrap();
        x.set(0, 0, 1, 1, 1.0).unwrap();
        let w = Tensor4D::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(|v| v as f32).collect())
            .unwrap();
        let out = direct_conv(&x, &w, None, &ConvSpec::same3x3(1)).unwrap();
        assert_eq!(out.at(0, 0, 1, 1).unwrap(), w.at(0, 0, 1, 1).unwrap());
        // Correlation without flip: output (0,0) sees the delta through w(2,2).
        assert_eq!(out.at(0, 0, 0, 0).unwrap(), w.at(0, 0, 2, 2).unwrap());
    }

    #[test]
    fn ones_valid_conv_gives_nines() {
        let x = Tensor4D::filled(Shape::new(1, 1, 5, 5), 1.0).unwrap();
        let w = Tensor4D::filled(Shape::new(1, 1, 3, 3), 1.0).unwrap();
        let spec = ConvSpec {
            pad: 0,
            ..ConvSpec::same3x3(1)
        };
        let out = direct_conv(&x, &w, None, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let (n, c, k) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let spec = ConvSpec {
                kernel_h: kh,
                kernel_w: kw,
                stride: rng.gen_range(1..3),
                pad: rng.gen_range(0..2),
                out_channels: k,
            };
            let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
            let x = random_tensor(&mut rng, Shape::new(n, c, h, w));
            let w = random_tensor(&mut rng, Shape::new(k, c, kh, kw));
            let b: Vec<f32> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = direct_conv(&x, &w, Some(&b), &spec).unwrap();
            let slow = brute_force_conv(&x, &w, Some(&b), &spec);
            assert_eq!(fast.shape(), slow.shape());
            // Same summation order per output element (bias, c, u, v), so exact.
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor4D::zeros(Shape::new(1, 2, 4, 4)).unwrap();
        let w = Tensor4D::zeros(Shape::new(1, 3, 3, 3)).unwrap();
        assert!(matches!(
            direct_conv(&x, &w, None, &ConvSpec::same3x3(1)),
            Err(LayerError::ChannelMismatch { input: 2, weights: 3 })
        ));
        let w = Tensor4D::zeros(Shape::new(2, 2, 3, 3)).unwrap();
        assert!(matches!(
            direct_conv(&x, &w, Some(&[0.0]), &ConvSpec::same3x3(2)),
            Err(LayerError::BiasLength { .. })
        ));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor4D::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor4D::filled(Shape::new(2, 2, 2, 2), -3.0).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_examples() {
        let x = Tensor4D::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let max = PoolSpec {
            window: 2,
            stride: 2,
            mode: PoolMode::Max,
        };
        assert_eq!(pool(&x, &max).unwrap().data(), &[4.0]);
        let avg = PoolSpec {
            mode: PoolMode::Average,
            ..max
        };
        assert_eq!(pool(&x, &avg).unwrap().data(), &[2.5]);

        let k = Tensor4D::filled(Shape::new(1, 2, 6, 6), 1.25).unwrap();
        let out = pool(&k, &PoolSpec { window: 3, stride: 1, mode: PoolMode::Max }).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 4, 4));
        assert!(out.data().iter().all(|&v| v == 1.25));

        assert!(matches!(
            pool(&x, &PoolSpec { window: 3, stride: 1, mode: PoolMode::Max }),
            Err(LayerError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn fc_examples() {
        let x = Tensor4D::from_vec(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0])
            .unwrap();
        let out = fully_connected(&x, &Matrix::identity(3), None).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(out.shape(), Shape::new(2, 3, 1, 1));

        let zeros = Tensor4D::zeros(Shape::new(2, 3, 1, 1)).unwrap();
        let w = Matrix::new(2, 3, vec![0.5; 6]).unwrap();
        let out = fully_connected(&zeros, &w, Some(&[1.0, -2.0])).unwrap();
        assert_eq!(out.data(), &[1.0, -2.0, 1.0, -2.0]);

        // Hand multiplication: [[1,2,3],[-1,0,2]] · [1,-1,2] = [5, 3].
        let w = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 2.0]).unwrap();
        let v = Tensor4D::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, -1.0, 2.0]).unwrap();
        assert_eq!(fully_connected(&v, &w, None).unwrap().data(), &[5.0, 3.0]);

        assert!(matches!(
            fully_connected(&v, &Matrix::identity(2), None),
            Err(LayerError::FeatureMismatch { .. })
        ));
    }

    fn small_tensor() -> impl Strategy<Value = Tensor4D> {
        (1usize..3, 1usize..3, 3usize..7, 3usize..7).prop_flat_map(|(n, c, h, w)| {
            proptest::collection::vec(-1.0f32..1.0, n * c * h * w)
                .prop_map(move |d| Tensor4D::from_vec(Shape::new(n, c, h, w), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn relu_bounds_and_idempotence(x in small_tensor()) {
            let r = relu(&x);
            for (a, b) in r.data().iter().zip(x.data()) {
                prop_assert!(*a >= 0.0 && *a <= b.abs());
            }
            prop_assert_eq!(relu(&r), r);
        }

        #[test]
        fn max_pool_dominates_average(x in small_tensor(), window in 1usize..4, stride in 1usize..3) {
            let max = PoolSpec { window, stride, mode: PoolMode::Max };
            let avg = PoolSpec { mode: PoolMode::Average, ..max };
            let (a, b) = (pool(&x, &max).unwrap(), pool(&x, &avg).unwrap());
            for (m, v) in a.data().iter().zip(b.data()) {
                prop_assert!(*m >= *v - 1e-6);
            }
        }

        #[test]
        fn same_conv_preserves_spatial_dims_and_is_linear(x in small_tensor(), scale in -2.0f32..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = x.shape();
            let w = random_tensor(&mut rng, Shape::new(2, s.c, 3, 3));
            let y = random_tensor(&mut rng, s);
            let spec = ConvSpec::same3x3(2);
            let cx = direct_conv(&x, &w, None, &spec).unwrap();
            prop_assert_eq!((cx.shape().h, cx.shape().w), (s.h, s.w));

            let mut sx = x.clone();
            sx.data_mut().iter_mut().for_each(|v| *v *= scale);
            let scaled = direct_conv(&sx, &w, None, &spec).unwrap();
            for (a, b) in scaled.data().iter().zip(cx.data()) {
                prop_assert!((a - scale * b).abs() <= 1e-5);
            }

            let mut sum = x.clone();
            sum.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
            let cy = direct_conv(&y, &w, None, &spec).unwrap();
            let csum = direct_conv(&sum, &w, None, &spec).unwrap();
            for ((a, b), c) in csum.data().iter().zip(cx.data()).zip(cy.data()) {
                prop_assert!((a - (b + c)).abs() <= 1e-5);
            }

            // Linear in the weights as well.
            let mut w2 = w.clone();
            w2.data_mut().iter_mut().for_each(|v| *v *= scale);
            let cw = direct_conv(&x, &w2, None, &spec).unwrap();
            for (a, b) in cw.data().iter().zip(cx.data()) {
                prop_assert!((a - scale * b).abs() <= 1e-5);
            }
        }
    }
}
