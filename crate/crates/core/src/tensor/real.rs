use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor): `f32` for training runs,
/// `f64` for gradient checks and initialization statistics.
pub trait Real:
    Float + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign
    + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Short name used in reports (`"f32"` / `"f64"`).
    const NAME: &'static str;

    fn cast_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← A·B + beta·C` for an `m × k` matrix `A` and `k × n` matrix `B`,
    /// both described by `[row_stride, col_stride]` pairs so transposed
    /// operands need no copy. `C` is dense row-major `m × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: [usize; 2],
        b: &[Self],
        b_strides: [usize; 2],
        beta: Self,
        c: &mut [Self],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: [usize; 2]) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides[0] + (cols - 1) * strides[1];
    assert!(last < len, "gemm operand too short: need index {last}, have {len}");
}

macro_rules! impl_real {
    ($ty:ty, $name:literal, $kernel:path) => {
        impl Real for $ty {
            const NAME: &'static str = $name;

            #[inline]
            fn cast_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: [usize; 2],
                b: &[Self],
                b_strides: [usize; 2],
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                assert_eq!(c.len(), m * n, "gemm output has wrong length");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: operand extents were checked above against the
                // strides handed to the kernel, and `c` is an exclusive
                // dense m × n buffer.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides[0] as isize,
                        a_strides[1] as isize,
                        b.as_ptr(),
                        b_strides[0] as isize,
                        b_strides[1] as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);
