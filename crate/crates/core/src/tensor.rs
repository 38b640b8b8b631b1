//! Dense NCHW tensors and the scalar trait the network is generic over.

use std::cell::RefCell;
use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of network tensors (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` for an (m×k)·(k×n) product with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// Run `f` with two thread-local scratch buffers of at least `a` and `b`
    /// elements. Their contents are unspecified on entry.
    fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $scratch:ident) => {
        thread_local! {
            static $scratch: RefCell<(Vec<$t>, Vec<$t>)> = const { RefCell::new((Vec::new(), Vec::new())) };
        }

        impl Real for $t {
            fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R {
                $scratch.with(|cell| {
                    // a re-entrant call gets fresh buffers instead of panicking
                    let Ok(mut bufs) = cell.try_borrow_mut() else {
                        return f(&mut vec![0.0; a], &mut vec![0.0; b]);
                    };
                    let (x, y) = &mut *bufs;
                    if x.len() < a {
                        x.resize(a, 0.0);
                    }
                    if y.len() < b {
                        y.resize(b, 0.0);
                    }
                    f(&mut x[..a], &mut y[..b])
                })
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched lies within the spans checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, SCRATCH_F32);
impl_real!(f64, matrixmultiply::dgemm, SCRATCH_F64);

/// Shape of a 4-D tensor: (batch, channels, height, width).
pub type Shape = [usize; 4];

/// A dense row-major NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Number of elements in one sample (C·H·W).
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let off = (n * self.shape[1] + c) * len;
        &self.data[off..off + len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    /// Concatenate single-sample tensors of equal shape along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Self {
        assert!(!parts.is_empty(), "stack of nothing");
        let s = parts[0].shape;
        assert!(s[0] == 1 && parts.iter().all(|p| p.shape == s), "stack: mismatched shapes");
        let mut data = Vec::with_capacity(parts.len() * parts[0].len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::from_vec([parts.len(), s[1], s[2], s[3]], data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
