//! Row-major 2-D tensor with the three matmul orientations backprop needs.
//!
//! Shape errors here are panics: the graph layer validates shapes at its
//! API boundary, so a mismatch inside a kernel is an internal bug.

use super::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Scalar> Tensor2<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![E::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length must equal rows × cols"
        );
        Tensor2 { rows, cols, data }
    }

    /// Build from an f64 slice, converting into the scalar type.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length must equal rows × cols"
        );
        Tensor2 {
            rows,
            cols,
            data: data.iter().map(|&v| E::from_f64(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: E) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterpret as a different shape with the same element count. The
    /// row-major layout makes this a metadata-only change.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(
            self.data.len(),
            rows * cols,
            "reshape must preserve element count"
        );
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = E> + '_ {
        self.data.iter().copied()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (m,k) × rhs (k,n) -> (m,n)`.
    pub fn mul_nn(&self, rhs: &Tensor2<E>) -> Tensor2<E> {
        assert_eq!(self.cols, rhs.rows, "inner dimensions must agree");
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Tensor2::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for p in 0..k {
                let a = a_row[p];
                if a == E::zero() {
                    continue;
                }
                let b_row = rhs.row(p);
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self (m,k) × rhsᵀ for rhs (n,k) -> (m,n)`.
    pub fn mul_nt(&self, rhs: &Tensor2<E>) -> Tensor2<E> {
        assert_eq!(self.cols, rhs.cols, "inner dimensions must agree");
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = Tensor2::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..n {
                let b_row = rhs.row(j);
                let mut acc = E::zero();
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                out_row[j] = acc;
            }
        }
        out
    }

    /// `selfᵀ for self (k,m) × rhs (k,n) -> (m,n)`.
    pub fn mul_tn(&self, rhs: &Tensor2<E>) -> Tensor2<E> {
        assert_eq!(self.rows, rhs.rows, "inner dimensions must agree");
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Tensor2::zeros(m, n);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = rhs.row(p);
            for i in 0..m {
                let a = a_row[i];
                if a == E::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a() -> Tensor2<f64> {
        Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    }

    fn b() -> Tensor2<f64> {
        Tensor2::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0])
    }

    #[test]
    fn mul_nn_known_product() {
        let c = a().mul_nn(&b());
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn mul_nt_matches_explicit_transpose() {
        // a (2,3) × bᵀ where b stored as (2,3): same as mul_nn(a, transpose(b)).
        let bt = Tensor2::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c = a().mul_nt(&bt);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn mul_tn_matches_explicit_transpose() {
        // aᵀ (3,2) × a (... we need self (k,m): use a as (2,3), so selfᵀ is (3,2).
        let c = a().mul_tn(&a());
        assert_eq!(
            c.data(),
            &[17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]
        );
    }

    #[test]
    fn reshape_is_metadata_only() {
        let t = a().reshaped(3, 2);
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn mismatched_mul_panics() {
        let _ = a().mul_nn(&a());
    }

    #[test]
    fn finite_scan() {
        let mut t = a();
        assert!(t.all_finite());
        t.set(1, 2, f64::NAN);
        assert!(!t.all_finite());
    }
}
