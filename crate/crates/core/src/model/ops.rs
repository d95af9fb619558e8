//! Dense row-major kernels. Shapes are passed explicitly; slices must match.

use crate::scalar::Real;

/// `out[n×m] = a[n×k] · b[k×m]`
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(T::ZERO);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            if av == T::ZERO {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×m] += aᵀ · b` with `a[n×k]`, `b[n×m]`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(m)) {
        if b_row.iter().all(|&v| v == T::ZERO) {
            continue;
        }
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += a · bᵀ` with `a[n×m]`, `b[k×m]`.
pub fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], n: usize, m: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * k);
    for (a_row, out_row) in a.chunks_exact(m).zip(out.chunks_exact_mut(k)) {
        if a_row.iter().all(|&v| v == T::ZERO) {
            continue;
        }
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(m)) {
            *o += dot(a_row, b_row);
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// In-place softmax of one row, returning nothing; the row must be non-empty.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}
