//! Dense and sparse complex linear algebra used by the oracle.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
/// Complex matrix on a (qubits ⊗ truncated Fock modes) space.
pub type DenseOperator = DMatrix<C64>;
pub type StateVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Pauli axis of a spin-dependent force.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PauliAxis {
    X,
    Y,
    Z,
}

impl PauliAxis {
    pub fn matrix(self) -> DenseOperator {
        match self {
            PauliAxis::X => DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]),
            PauliAxis::Y => DMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO]),
            PauliAxis::Z => DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]),
        }
    }

    /// Action on a computational basis bit: `σ|b⟩ = amp |b'⟩`.
    pub(crate) fn act_on_bit(self, bit: usize) -> (usize, C64) {
        match (self, bit) {
            (PauliAxis::X, b) => (b ^ 1, ONE),
            (PauliAxis::Y, 0) => (1, I),
            (PauliAxis::Y, _) => (0, -I),
            (PauliAxis::Z, 0) => (0, ONE),
            (PauliAxis::Z, _) => (1, -ONE),
        }
    }

    pub fn label(self) -> char {
        match self {
            PauliAxis::X => 'x',
            PauliAxis::Y => 'y',
            PauliAxis::Z => 'z',
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "x" | "X" => Some(PauliAxis::X),
            "y" | "Y" => Some(PauliAxis::Y),
            "z" | "Z" => Some(PauliAxis::Z),
            _ => None,
        }
    }
}

/// Largest entry modulus.
pub fn max_abs(m: &DenseOperator) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// `‖U†U − I‖_max`.
pub fn unitarity_error(u: &DenseOperator) -> f64 {
    let n = u.ncols();
    max_abs(&(u.adjoint() * u - DenseOperator::identity(n, n)))
}

/// `‖H − H†‖_max`.
pub fn hermiticity_error(h: &DenseOperator) -> f64 {
    max_abs(&(h - h.adjoint()))
}

pub fn kron(a: &DenseOperator, b: &DenseOperator) -> DenseOperator {
    a.kronecker(b)
}

pub fn commutator(a: &DenseOperator, b: &DenseOperator) -> DenseOperator {
    a * b - b * a
}

fn one_norm(a: &DenseOperator) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DenseOperator) -> DenseOperator {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * C64::new(0.5f64.powi(squarings), 0.0);
    let mut result = DenseOperator::identity(n, n);
    let mut term = DenseOperator::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled * C64::new(1.0 / k as f64, 0.0);
        result += &term;
        if max_abs(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `exp(-i θ H)` for Hermitian `H`.
pub fn expm_hermitian(h: &DenseOperator, theta: f64) -> DenseOperator {
    expm(&(h * C64::new(0.0, -theta)))
}

/// Square-matrix in compressed sparse row form.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; dim + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet out of range");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseOperator {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim)
            .flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (r, self.cols[p], self.vals[p])))
    }

    pub fn to_dense(&self) -> DenseOperator {
        let mut m = DenseOperator::zeros(self.dim, self.dim);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn adjoint(&self) -> SparseOperator {
        SparseOperator::from_triplets(self.dim, self.iter().map(|(r, c, v)| (c, r, v.conj())).collect())
    }
}

/// A fixed sparsity pattern with row-major storage; values are supplied per call.
#[derive(Clone, Debug)]
pub(crate) struct Pattern {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Pattern {
    /// Union pattern of several operators, plus for each operator the position
    /// of each of its entries inside the union.
    pub fn union(dim: usize, ops: &[&SparseOperator]) -> (Pattern, Vec<Vec<(usize, C64)>>) {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); dim];
        for op in ops {
            for (r, c, _) in op.iter() {
                rows[r].push(c);
            }
        }
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
        }
        let mut row_ptr = vec![0; dim + 1];
        for r in 0..dim {
            row_ptr[r + 1] = row_ptr[r] + rows[r].len();
        }
        let cols: Vec<usize> = rows.iter().flatten().copied().collect();
        let slots = ops
            .iter()
            .map(|op| {
                op.iter()
                    .map(|(r, c, v)| {
                        let offset = rows[r].binary_search(&c).expect("entry in union");
                        (row_ptr[r] + offset, v)
                    })
                    .collect()
            })
            .collect();
        (Pattern { dim, row_ptr, cols }, slots)
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `out = A x` for the matrix with this pattern and `vals`.
    pub fn apply(&self, vals: &[C64], x: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        debug_assert_eq!(x.nrows(), self.dim);
        for j in 0..x.ncols() {
            let xc = x.column(j);
            let mut oc = out.column_mut(j);
            for r in 0..self.dim {
                let mut acc = ZERO;
                for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += vals[p] * xc[self.cols[p]];
                }
                oc[r] = acc;
            }
        }
    }

    /// Infinity norm (max absolute row sum).
    pub fn inf_norm(&self, vals: &[C64]) -> f64 {
        (0..self.dim)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|p| vals[p].norm())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Connected components of the (symmetrized) adjacency graph, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.dim).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for r in 0..self.dim {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (a, b) = (find(&mut parent, r), find(&mut parent, self.cols[p]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for x in 0..self.dim {
            let root = find(&mut parent, x);
            groups.entry(root).or_default().push(x);
        }
        groups.into_values().collect()
    }

    /// Restrict to `rows` (which must be closed under the adjacency), returning
    /// the sub-pattern and for each of its entries the index into the parent values.
    pub fn restrict(&self, rows: &[usize]) -> (Pattern, Vec<usize>) {
        let mut local = vec![usize::MAX; self.dim];
        for (i, &r) in rows.iter().enumerate() {
            local[r] = i;
        }
        let mut row_ptr = vec![0; rows.len() + 1];
        let mut cols = Vec::new();
        let mut source = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = local[self.cols[p]];
                debug_assert!(c != usize::MAX, "component not closed");
                cols.push(c);
                source.push(p);
            }
            row_ptr[i + 1] = cols.len();
        }
        (
            Pattern {
                dim: rows.len(),
                row_ptr,
                cols,
            },
            source,
        )
    }
}
