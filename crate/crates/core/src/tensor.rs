//! Dense rank-3 arrays in row-major `(height, width, channel)` order and the
//! elementwise operations the recurrent units are built from.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::Real;

/// Spatial extent plus channel count of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Dense `height × width × channels` array.
///
/// Channels are innermost, so concatenating along channels is contiguous per
/// pixel and a `1×1` convolution is a plain matrix product over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(config_err(format!("tensor dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(config_err(format!(
                "tensor {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`, drawn in f64 and narrowed.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.shape.height && x < self.shape.width && c < self.shape.channels);
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: T) {
        let i = self.offset(y, x, c);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element-type conversion through f64.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

fn check_same_shape<T>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(config_err(format!(
            "{op}: shape mismatch {} vs {}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Cotangent through the logistic function, given its forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sigmoid_backward", y, grad, |y, g| g * y * (T::one() - y))
}

/// Elementwise hyperbolic tangent.
pub fn tanh_act<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// Cotangent through `tanh`, given its forward output `y`.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("tanh_backward", y, grad, |y, g| g * (T::one() - y * y))
}

fn zip_with<T: Real>(
    op: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn elementwise_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("elementwise_add", a, b, |x, y| x + y)
}

/// The cotangent of a sum flows unchanged into both operands.
pub fn elementwise_add_backward<T: Real>(grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad.clone(), grad.clone())
}

pub fn elementwise_mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("elementwise_mul", a, b, |x, y| x * y)
}

/// Returns `(grad ⊙ b, grad ⊙ a)`.
pub fn elementwise_mul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_same_shape("elementwise_mul_backward", a, b)?;
    Ok((
        zip_with("elementwise_mul_backward", grad, b, |g, y| g * y)?,
        zip_with("elementwise_mul_backward", grad, a, |g, x| g * x)?,
    ))
}

/// Concatenate along channels, preserving part order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| config_err("concat_channels: no parts"))?;
    let (h, w) = (first.height(), first.width());
    if let Some(bad) = parts.iter().find(|p| p.height() != h || p.width() != w) {
        return Err(config_err(format!(
            "concat_channels: spatial mismatch {} vs {}",
            first.shape, bad.shape
        )));
    }
    let channels: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(h * w * channels);
    for pixel in 0..h * w {
        for part in parts {
            let c = part.channels();
            data.extend_from_slice(&part.data[pixel * c..(pixel + 1) * c]);
        }
    }
    Ok(Tensor {
        shape: Shape::new(h, w, channels),
        data,
    })
}

/// Split along channels into blocks of the given sizes; the inverse of
/// [`concat_channels`] and therefore also its backward pass.
pub fn split_channels<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.channels() {
        return Err(config_err(format!(
            "split_channels: blocks sum to {total}, tensor has {} channels",
            x.channels()
        )));
    }
    if sizes.contains(&0) {
        return Err(config_err("split_channels: zero-width block"));
    }
    let pixels = x.shape.pixels();
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(pixels * s)).collect();
    for pixel in x.data.chunks_exact(total) {
        let mut start = 0;
        for (buf, &s) in out.iter_mut().zip(sizes) {
            buf.extend_from_slice(&pixel[start..start + s]);
            start += s;
        }
    }
    Ok(out
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor {
            shape: x.shape.with_channels(s),
            data,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(h: usize, w: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(h, w, c), v.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(2, 2, 1), vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(Shape::new(0, 2, 1), vec![]).is_err());
    }

    #[test]
    fn activations_at_symmetry_point() {
        let z = Tensor::<f64>::zeros(Shape::new(1, 1, 1));
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        assert_eq!(tanh_act(&z).data(), &[0.0]);
        let ones = Tensor::filled(Shape::new(1, 1, 1), 1.0);
        let g = sigmoid_backward(&sigmoid(&z), &ones).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        let x = t(1, 1, 4, &[-1e4, -800.0, 800.0, 1e4]);
        let y = sigmoid(&x);
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 1.0);
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform(Shape::new(4, 3, 2), -6.0, 6.0, &mut rng);
        let s = sigmoid(&x);
        let sn = sigmoid(&x.scale(-1.0));
        for (a, b) in s.data().iter().zip(sn.data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_layout() {
        let a = t(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(1, 2, 3, &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 2, 5));
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(2, 2, 1));
        let b = Tensor::<f64>::zeros(Shape::new(2, 3, 1));
        assert!(matches!(concat_channels(&[&a, &b]), Err(crate::Error::Config(_))));
        assert!(concat_channels::<f64>(&[]).is_err());
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let a = Tensor::<f64>::random_uniform(Shape::new(3, 3, 2), -1.0, 1.0, &mut rng);
        let ones = Tensor::filled(a.shape(), 1.0);
        let zeros = Tensor::zeros(a.shape());
        assert_eq!(elementwise_mul(&a, &ones).unwrap(), a);
        assert_eq!(elementwise_add(&a, &zeros).unwrap(), a);
        assert!(elementwise_mul(&a, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        let b = Tensor::<f64>::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        let (ga, gb) = elementwise_mul_backward(&a, &b, &g).unwrap();
        assert_eq!(ga, elementwise_mul(&g, &b).unwrap());
        assert_eq!(gb, elementwise_mul(&g, &a).unwrap());
    }

    #[test]
    fn elementwise_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(2, 2, 1));
        let b = Tensor::<f64>::zeros(Shape::new(2, 2, 2));
        assert!(elementwise_add(&a, &b).is_err());
        assert!(elementwise_mul(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn split_then_concat_round_trips(
            h in 1usize..4, w in 1usize..4,
            sizes in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let c: usize = sizes.iter().sum();
            let x = Tensor::<f64>::random_uniform(Shape::new(h, w, c), -1.0, 1.0, &mut rng);
            let parts = split_channels(&x, &sizes).unwrap();
            let refs: Vec<_> = parts.iter().collect();
            let back = concat_channels(&refs).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn forward_ops_preserve_finiteness(seed in any::<u64>(), scale in 0.0f64..1e3) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let x = Tensor::<f64>::random_uniform(Shape::new(3, 3, 2), -scale - 1.0, scale + 1.0, &mut rng);
            prop_assert!(sigmoid(&x).is_finite());
            prop_assert!(tanh_act(&x).is_finite());
            prop_assert!(elementwise_mul(&x, &x).unwrap().is_finite());
        }
    }
}
