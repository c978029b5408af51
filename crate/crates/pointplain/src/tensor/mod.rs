//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain shape+data value. Differentiation happens on a
//! [`graph::Graph`]: a dynamic tape rebuilt on every forward pass. Learned
//! state lives in a [`store::ParameterStore`], which the tape reads at the
//! start of a pass and writes gradients back into on `backward`.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod store;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use optim::{adamw_step, lr_schedule, OptimizerState};
pub use store::ParameterStore;

use crate::error::{Error, Result};

/// Dense row-major multi-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("finite scalar")
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows × columns view of the last axis: everything before the last axis
    /// is flattened into rows.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }
}

/// True when the running CPU offers AVX2+FMA; kernels then take the
/// vector-compiled path. Same binary on the same machine always takes the
/// same path, so per-seed determinism is unaffected.
#[cfg(target_arch = "x86_64")]
fn have_fma() -> bool {
    static FLAG: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *FLAG.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[cfg(not(target_arch = "x86_64"))]
fn have_fma() -> bool {
    false
}

macro_rules! row_kernel {
    ($plain:ident, $fast:ident, |$arg0:ident : $t0:ty, $arg1:ident : $t1:ty, $arg2:ident : $t2:ty, $arg3:ident : $t3:ty| $body:block) => {
        #[inline(always)]
        fn $plain($arg0: $t0, $arg1: $t1, $arg2: $t2, $arg3: $t3) $body

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $fast($arg0: $t0, $arg1: $t1, $arg2: $t2, $arg3: $t3) {
            $plain($arg0, $arg1, $arg2, $arg3)
        }

        #[cfg(not(target_arch = "x86_64"))]
        unsafe fn $fast($arg0: $t0, $arg1: $t1, $arg2: $t2, $arg3: $t3) {
            $plain($arg0, $arg1, $arg2, $arg3)
        }
    };
}

row_kernel!(
    nn_row,
    nn_row_fast,
    |arow: &[f64], b: &[f64], n: usize, crow: &mut [f64]| {
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
);

row_kernel!(
    nt_row,
    nt_row_fast,
    |arow: &[f64], b: &[f64], k: usize, crow: &mut [f64]| {
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
);

/// `c = a(m×k) · b(k×n)`, accumulating into a zeroed output.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let fast = have_fma();
    let body = move |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        if fast {
            unsafe { nn_row_fast(arow, b, n, crow) }
        } else {
            nn_row(arow, b, n, crow)
        }
    };
    run_rows(c, n, m * n * k, body);
}

/// `c = a(m×k) · b(n×k)ᵀ` — inner products of rows.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let fast = have_fma();
    let body = move |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        if fast {
            unsafe { nt_row_fast(arow, b, k, crow) }
        } else {
            nt_row(arow, b, k, crow)
        }
    };
    run_rows(c, n, m * n * k, body);
}

/// `c = a(k×m)ᵀ · b(k×n)`. The strided reads of `a` stay in the outer loop,
/// so the inner loop is the same contiguous update as the NN kernel.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let fast = have_fma();
    let body = move |i: usize, crow: &mut [f64]| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            if fast {
                unsafe { axpy_fast(av, brow, crow) }
            } else {
                axpy(av, brow, crow);
            }
        }
    };
    run_rows(c, n, m * n * k, body);
}

#[inline(always)]
fn axpy(av: f64, brow: &[f64], crow: &mut [f64]) {
    for (cv, &bv) in crow.iter_mut().zip(brow) {
        *cv += av * bv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn axpy_fast(av: f64, brow: &[f64], crow: &mut [f64]) {
    axpy(av, brow, crow)
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn axpy_fast(av: f64, brow: &[f64], crow: &mut [f64]) {
    axpy(av, brow, crow)
}

/// Runs `body(i, row_i)` over the rows of `c`. Parallelizes across rows when
/// the work is large enough; per-row arithmetic order is fixed either way, so
/// results are bit-identical with any thread count.
fn run_rows<F>(c: &mut [f64], n: usize, flops: usize, body: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    const PAR_THRESHOLD: usize = 1 << 22;
    if flops >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, f64::NAN]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a · bᵀ with b stored transposed (2×3)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut c2);
        assert_eq!(c, c2);

        // aᵀ · b with a stored transposed (3×2)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        matmul_tn(&at, &b, 2, 3, 2, &mut c3);
        assert_eq!(c, c3);
    }
}
