//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every node stores a dense matrix. Scalars are 1×1 matrices. The op set is
//! the small vocabulary the bounds need: products, triangular solves,
//! Cholesky, the squared-exponential cross kernel and a few "grouped" ops that
//! work on consecutive runs of rows (the K importance copies of a datapoint).

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{cholesky_psd, solve_lower_in_place, solve_upper_t_in_place, JitterPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Consecutive runs of rows. Group `g` covers rows `starts[g]..starts[g] + lens[g]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    starts: Vec<usize>,
    lens: Vec<usize>,
    max_len: usize,
    total: usize,
}

impl Groups {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        assert!(lens.iter().all(|&l| l > 0), "groups must be non-empty");
        let mut starts = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in &lens {
            starts.push(total);
            total += l;
        }
        let max_len = lens.iter().copied().max().unwrap_or(0);
        Groups { starts, lens, max_len, total }
    }

    /// `n` groups of `k` rows each.
    pub fn uniform(n: usize, k: usize) -> Self {
        Groups::from_lens(vec![k; n])
    }

    pub fn singletons(n: usize) -> Self {
        Groups::uniform(n, 1)
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().copied().zip(self.lens.iter().copied())
    }

    pub fn group(&self, g: usize) -> (usize, usize) {
        (self.starts[g], self.lens[g])
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    Recip,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScalarMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    SumRows(Var),
    /// relative jitter: the factor is of `a + rel · mean(diag a) · I`
    Cholesky(Var, f64),
    TriSolve { l: Var, b: Var, transposed: bool },
    LogDiagSum(Var),
    SqExpCross(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Arc<[usize]> },
    GroupSqExp { x: Var, groups: Arc<Groups> },
    GroupGram { a: Var, b: Var, groups: Arc<Groups> },
    GroupChol { blocks: Var, groups: Arc<Groups>, rel_jitter: Vec<f64> },
    GroupMatVec { l: Var, eps: Var, groups: Arc<Groups> },
    GroupLogMeanExp { v: Var, groups: Arc<Groups> },
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// The recording. Build a graph with the op methods, then call [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    policy: JitterPolicy,
}

/// Adjoints of every node reached from the output.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(v).cloned().unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {what}");
}

/// Adjoint of `a = L Lᵀ` for symmetric perturbations of `a`.
fn cholesky_adjoint(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let lbar = lbar.lower_triangle();
    let m = l.tr_mul(&lbar);
    let mut p = m.lower_triangle();
    for i in 0..n {
        p[(i, i)] *= 0.5;
    }
    let mut p = (&p + p.transpose()) * 0.5;
    // L⁻ᵀ P L⁻¹
    solve_upper_t_in_place(l, &mut p);
    let mut pt = p.transpose();
    solve_upper_t_in_place(l, &mut pt);
    let a = pt.transpose();
    (&a + a.transpose()) * 0.5
}

/// The jitter scales with the mean diagonal, so it carries gradient along the identity.
fn jittered_cholesky_adjoint(l: &DMatrix<f64>, lbar: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let mut a = cholesky_adjoint(l, lbar);
    if rel > 0.0 {
        let n = a.nrows();
        let t = a.trace() * rel / n as f64;
        for i in 0..n {
            a[(i, i)] += t;
        }
    }
    a
}

fn relative_jitter(a: &DMatrix<f64>, jitter: f64) -> f64 {
    if jitter == 0.0 {
        return 0.0;
    }
    jitter / (a.trace() / a.nrows() as f64)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), policy: JitterPolicy::default() }
    }

    pub fn with_policy(policy: JitterPolicy) -> Self {
        Tape { nodes: Vec::new(), policy }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    /// `aᵀ b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).tr_mul(self.value(b));
        self.push(v, Op::MatMulTn(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::Offset(a))
    }

    /// Multiplies matrix `m` by the 1×1 node `s`.
    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Var {
        let v = self.value(m) * self.scalar(s);
        self.push(v, Op::ScalarMul(s, m))
    }

    /// Adds the 1×c row `row` to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut v = self.value(m).clone();
        assert_eq!(r.shape(), (1, v.ncols()), "add_row shape");
        for j in 0..v.ncols() {
            let rj = r[(0, j)];
            v.column_mut(j).add_scalar_mut(rj);
        }
        self.push(v, Op::AddRow(m, row))
    }

    /// Scales column `j` of `m` by `row[j]`.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut v = self.value(m).clone();
        assert_eq!(r.shape(), (1, v.ncols()), "mul_row shape");
        for j in 0..v.ncols() {
            let rj = r[(0, j)];
            v.column_mut(j).scale_mut(rj);
        }
        self.push(v, Op::MulRow(m, row))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Tanh => f64::tanh,
            Unary::Recip => f64::recip,
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(a, kind))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Row sums as an r×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = DMatrix::zeros(m.nrows(), 1);
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                v[(i, 0)] += m[(i, j)];
            }
        }
        self.push(v, Op::SumRows(a))
    }

    /// Lower Cholesky factor with jitter escalation.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let am = self.value(a);
        let f = cholesky_psd(am, &self.policy)?;
        let rel = relative_jitter(am, f.jitter);
        Ok(self.push(f.l, Op::Cholesky(a, rel)))
    }

    /// `l⁻¹ b`, or `l⁻ᵀ b` when `transposed`.
    pub fn tri_solve(&mut self, l: Var, b: Var, transposed: bool) -> Var {
        let lm = self.value(l);
        let mut x = self.value(b).clone();
        assert_eq!(lm.nrows(), x.nrows(), "tri_solve shape");
        if transposed {
            solve_upper_t_in_place(lm, &mut x);
        } else {
            solve_lower_in_place(lm, &mut x);
        }
        self.push(x, Op::TriSolve { l, b, transposed })
    }

    /// `Σ log l_ii`
    pub fn log_diag_sum(&mut self, l: Var) -> Var {
        let m = self.value(l);
        let s: f64 = (0..m.nrows()).map(|i| m[(i, i)].ln()).sum();
        self.push(DMatrix::from_element(1, 1, s), Op::LogDiagSum(l))
    }

    /// `exp(-½‖a_i − b_j‖²)` for rows `a_i`, `b_j`.
    pub fn sq_exp_cross(&mut self, a: Var, b: Var) -> Var {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.ncols(), bm.ncols(), "sq_exp_cross column count");
        let v = sq_exp_cross_value(am, bm);
        self.push(v, Op::SqExpCross(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut c = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), rows, "concat_cols row count");
            v.columns_mut(c, m.ncols()).copy_from(m);
            c += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        self.push(v, Op::SliceCols { a, start })
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let m = self.value(a);
        let mut v = DMatrix::zeros(idx.len(), m.ncols());
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from(&m.row(r));
        }
        self.push(v, Op::GatherRows { a, idx })
    }

    /// Within-group squared-exponential blocks of the rows of `x`.
    ///
    /// Output is `total × max_len`; row `s + i` of group `(s, n)` holds
    /// `k(x_{s+i}, x_{s+j})` in column `j < n`.
    pub fn group_sq_exp(&mut self, x: Var, groups: Arc<Groups>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.nrows(), groups.total(), "group_sq_exp rows");
        let mut v = DMatrix::zeros(groups.total(), groups.max_len());
        for (s, n) in groups.iter() {
            for i in 0..n {
                for j in 0..n {
                    let d2: f64 = (0..xm.ncols())
                        .map(|d| {
                            let t = xm[(s + i, d)] - xm[(s + j, d)];
                            t * t
                        })
                        .sum();
                    v[(s + i, j)] = (-0.5 * d2).exp();
                }
            }
        }
        self.push(v, Op::GroupSqExp { x, groups })
    }

    /// Within-group Gram blocks `a_{s+i}ᵀ b_{s+j}` of the COLUMNS of `a` and `b`.
    pub fn group_gram(&mut self, a: Var, b: Var, groups: Arc<Groups>) -> Var {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.shape(), bm.shape(), "group_gram shapes");
        assert_eq!(am.ncols(), groups.total(), "group_gram columns");
        let mut v = DMatrix::zeros(groups.total(), groups.max_len());
        for (s, n) in groups.iter() {
            for i in 0..n {
                let ai = am.column(s + i);
                for j in 0..n {
                    v[(s + i, j)] = ai.dot(&bm.column(s + j));
                }
            }
        }
        self.push(v, Op::GroupGram { a, b, groups })
    }

    /// Per-group Cholesky of the blocks laid out as by [`Tape::group_gram`].
    ///
    /// Singleton groups take `sqrt(max(v, 0))`, failing when `v < -neg_tol`.
    /// Larger blocks are symmetrized and factorized with jitter escalation.
    pub fn group_chol(&mut self, blocks: Var, groups: Arc<Groups>, neg_tol: f64) -> Result<Var> {
        let bm = self.value(blocks);
        let mut v = DMatrix::zeros(groups.total(), groups.max_len());
        let mut rel_jitter = vec![0.0; groups.len()];
        for (gi, (s, n)) in groups.iter().enumerate() {
            if n == 1 {
                let x = bm[(s, 0)];
                if x < -neg_tol || x.is_nan() {
                    return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
                }
                v[(s, 0)] = x.max(0.0).sqrt();
            } else {
                let blk = bm.view((s, 0), (n, n));
                let sym = (&blk + blk.transpose()) * 0.5;
                let f = cholesky_psd(&sym, &self.policy)?;
                rel_jitter[gi] = relative_jitter(&sym, f.jitter);
                v.view_mut((s, 0), (n, n)).copy_from(&f.l);
            }
        }
        Ok(self.push(v, Op::GroupChol { blocks, groups, rel_jitter }))
    }

    /// `out_{s+i} = Σ_j L_{s+i, j} eps_{s+j}` with the block layout above. `eps` is total×1.
    pub fn group_mat_vec(&mut self, l: Var, eps: Var, groups: Arc<Groups>) -> Var {
        let lm = self.value(l);
        let em = self.value(eps);
        assert_eq!(em.shape(), (groups.total(), 1), "group_mat_vec eps shape");
        let mut v = DMatrix::zeros(groups.total(), 1);
        for (s, n) in groups.iter() {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += lm[(s + i, j)] * em[(s + j, 0)];
                }
                v[(s + i, 0)] = acc;
            }
        }
        self.push(v, Op::GroupMatVec { l, eps, groups })
    }

    /// `log((1/n) Σ exp(v))` within each group of the total×1 column `v`.
    pub fn group_log_mean_exp(&mut self, v: Var, groups: Arc<Groups>) -> Var {
        let vm = self.value(v);
        assert_eq!(vm.shape(), (groups.total(), 1), "group_log_mean_exp shape");
        let mut out = DMatrix::zeros(groups.len(), 1);
        for (g, (s, n)) in groups.iter().enumerate() {
            let vals: Vec<f64> = (s..s + n).map(|r| vm[(r, 0)]).collect();
            out[(g, 0)] = crate::numerics::log_mean_exp(&vals);
        }
        self.push(out, Op::GroupLogMeanExp { v, groups })
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(&mut grads[a.0], g * val(*b).transpose());
                accumulate(&mut grads[b.0], val(*a).tr_mul(g));
            }
            Op::MatMulTn(a, b) => {
                accumulate(&mut grads[a.0], val(*b) * g.transpose());
                accumulate(&mut grads[b.0], val(*a) * g);
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], -g);
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], g.component_mul(val(*b)));
                accumulate(&mut grads[b.0], g.component_mul(val(*a)));
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
            Op::Offset(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::ScalarMul(s, m) => {
                let sv = val(*s)[(0, 0)];
                let ds = g.dot(val(*m));
                accumulate(&mut grads[s.0], DMatrix::from_element(1, 1, ds));
                accumulate(&mut grads[m.0], g * sv);
            }
            Op::AddRow(m, row) => {
                accumulate(&mut grads[m.0], g.clone());
                let mut r = DMatrix::zeros(1, g.ncols());
                for j in 0..g.ncols() {
                    r[(0, j)] = g.column(j).sum();
                }
                accumulate(&mut grads[row.0], r);
            }
            Op::MulRow(m, row) => {
                let mv = val(*m);
                let rv = val(*row);
                let mut gm = g.clone();
                let mut gr = DMatrix::zeros(1, g.ncols());
                for j in 0..g.ncols() {
                    gr[(0, j)] = g.column(j).dot(&mv.column(j));
                    gm.column_mut(j).scale_mut(rv[(0, j)]);
                }
                accumulate(&mut grads[m.0], gm);
                accumulate(&mut grads[row.0], gr);
            }
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = &node.value;
                let d = match kind {
                    Unary::Exp => g.component_mul(y),
                    Unary::Log => g.component_div(x),
                    Unary::Sqrt => g.zip_map(y, |gi, yi| if yi > 0.0 { 0.5 * gi / yi } else { 0.0 }),
                    Unary::Square => g.zip_map(x, |gi, xi| 2.0 * gi * xi),
                    Unary::Tanh => g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)),
                    Unary::Recip => g.zip_map(y, |gi, yi| -gi * yi * yi),
                };
                accumulate(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(&mut grads[a.0], DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                accumulate(&mut grads[a.0], DMatrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Cholesky(a, rel) => accumulate(&mut grads[a.0], jittered_cholesky_adjoint(&node.value, g, *rel)),
            Op::TriSolve { l, b, transposed } => {
                let lm = val(*l);
                let x = &node.value;
                let mut bbar = g.clone();
                let lbar = if *transposed {
                    solve_lower_in_place(lm, &mut bbar);
                    -(x * bbar.transpose()).lower_triangle()
                } else {
                    solve_upper_t_in_place(lm, &mut bbar);
                    -(&bbar * x.transpose()).lower_triangle()
                };
                accumulate(&mut grads[b.0], bbar);
                accumulate(&mut grads[l.0], lbar);
            }
            Op::LogDiagSum(l) => {
                let lm = val(*l);
                let n = lm.nrows();
                let mut d = DMatrix::zeros(n, lm.ncols());
                for k in 0..n {
                    d[(k, k)] = g[(0, 0)] / lm[(k, k)];
                }
                accumulate(&mut grads[l.0], d);
            }
            Op::SqExpCross(a, b) => {
                let am = val(*a);
                let bm = val(*b);
                let w = g.component_mul(&node.value);
                // ā_i = Σ_j w_ij (b_j − a_i),  b̄_j = Σ_i w_ij (a_i − b_j)
                let mut ga = &w * bm;
                for i in 0..am.nrows() {
                    let rs = w.row(i).sum();
                    for d in 0..am.ncols() {
                        ga[(i, d)] -= rs * am[(i, d)];
                    }
                }
                let mut gb = w.tr_mul(am);
                for j in 0..bm.nrows() {
                    let cs = w.column(j).sum();
                    for d in 0..bm.ncols() {
                        gb[(j, d)] -= cs * bm[(j, d)];
                    }
                }
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    accumulate(&mut grads[p.0], g.columns(c, w).into_owned());
                    c += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = val(*a).shape();
                let mut d = DMatrix::zeros(r, c);
                d.columns_mut(*start, g.ncols()).copy_from(g);
                accumulate(&mut grads[a.0], d);
            }
            Op::GatherRows { a, idx } => {
                let (r, c) = val(*a).shape();
                let mut d = DMatrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[(src, j)] += g[(i, j)];
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::GroupSqExp { x, groups } => {
                let xm = val(*x);
                let mut d = DMatrix::zeros(xm.nrows(), xm.ncols());
                for (s, n) in groups.iter() {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = g[(s + i, j)] * node.value[(s + i, j)];
                            for c in 0..xm.ncols() {
                                let diff = xm[(s + j, c)] - xm[(s + i, c)];
                                d[(s + i, c)] += w * diff;
                                d[(s + j, c)] -= w * diff;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::GroupGram { a, b, groups } => {
                let am = val(*a);
                let bm = val(*b);
                let mut da = DMatrix::zeros(am.nrows(), am.ncols());
                let mut db = DMatrix::zeros(bm.nrows(), bm.ncols());
                for (s, n) in groups.iter() {
                    for i in 0..n {
                        for j in 0..n {
                            let w = g[(s + i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            da.column_mut(s + i).axpy(w, &bm.column(s + j), 1.0);
                            db.column_mut(s + j).axpy(w, &am.column(s + i), 1.0);
                        }
                    }
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::GroupChol { blocks, groups, rel_jitter } => {
                let (r, c) = val(*blocks).shape();
                let mut d = DMatrix::zeros(r, c);
                for (gi, (s, n)) in groups.iter().enumerate() {
                    if n == 1 {
                        let l = node.value[(s, 0)];
                        if l > 0.0 {
                            d[(s, 0)] = 0.5 * g[(s, 0)] / l;
                        }
                    } else {
                        let l = node.value.view((s, 0), (n, n)).into_owned();
                        let lbar = g.view((s, 0), (n, n)).into_owned();
                        d.view_mut((s, 0), (n, n)).copy_from(&jittered_cholesky_adjoint(&l, &lbar, rel_jitter[gi]));
                    }
                }
                accumulate(&mut grads[blocks.0], d);
            }
            Op::GroupMatVec { l, eps, groups } => {
                let lm = val(*l);
                let em = val(*eps);
                let mut dl = DMatrix::zeros(lm.nrows(), lm.ncols());
                let mut de = DMatrix::zeros(em.nrows(), 1);
                for (s, n) in groups.iter() {
                    for i in 0..n {
                        let gi = g[(s + i, 0)];
                        for j in 0..=i {
                            dl[(s + i, j)] += gi * em[(s + j, 0)];
                            de[(s + j, 0)] += gi * lm[(s + i, j)];
                        }
                    }
                }
                accumulate(&mut grads[l.0], dl);
                accumulate(&mut grads[eps.0], de);
            }
            Op::GroupLogMeanExp { v, groups } => {
                let vm = val(*v);
                let mut d = DMatrix::zeros(vm.nrows(), 1);
                for (gi, (s, n)) in groups.iter().enumerate() {
                    let lse = node.value[(gi, 0)] + (n as f64).ln();
                    for r in s..s + n {
                        d[(r, 0)] = g[(gi, 0)] * (vm[(r, 0)] - lse).exp();
                    }
                }
                accumulate(&mut grads[v.0], d);
            }
        }
    }
}

/// Dense `exp(-½‖a_i − b_j‖²)`.
pub(crate) fn sq_exp_cross_value(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let an: Vec<f64> = (0..a.nrows()).map(|i| a.row(i).norm_squared()).collect();
    let bn: Vec<f64> = (0..b.nrows()).map(|j| b.row(j).norm_squared()).collect();
    let mut v = a * b.transpose();
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let d2 = (an[i] + bn[j] - 2.0 * v[(i, j)]).max(0.0);
            v[(i, j)] = (-0.5 * d2).exp();
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{draw_standard_normal, RngStream};

    fn rand_mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_vec(r, c, draw_standard_normal(&RngStream::new(seed), r * c))
    }

    /// Central-difference check of d f / d leaf for every entry of every leaf.
    fn check<F>(inputs: &[DMatrix<f64>], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &leaves);
        let grads = tape.backward(out);
        let eval = |vals: &[DMatrix<f64>]| {
            let mut t = Tape::new();
            let l: Vec<Var> = vals.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&mut t, &l);
            t.scalar(o)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(leaves[k], m.shape());
            for idx in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k][idx] += h;
                let mut minus = inputs.to_vec();
                minus[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g[idx];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(1.0),
                    "leaf {k} entry {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn products_and_elementwise() {
        let a = rand_mat(3, 4, 1);
        let b = rand_mat(4, 2, 2);
        let c = rand_mat(3, 2, 3);
        check(&[a, b, c], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let p = t.mul(ab, v[2]);
            let e = t.exp(p);
            let th = t.tanh(e);
            let tr = t.transpose(th);
            let q = t.matmul_tn(v[2], ab);
            let s1 = t.sum(tr);
            let s2 = t.sum(q);
            let s = t.add(s1, s2);
            let sq = t.square(s);
            t.scale(sq, 0.3)
        });
    }

    #[test]
    fn row_ops_slices_gathers() {
        let m = rand_mat(4, 3, 4);
        let r = rand_mat(1, 3, 5);
        check(&[m, r], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(a, v[1]);
            let idx: Arc<[usize]> = Arc::from(vec![0usize, 2, 2, 3, 1]);
            let gth = t.gather_rows(b, idx);
            let sl = t.slice_cols(gth, 1, 2);
            let cc = t.concat_cols(&[sl, gth]);
            let sr = t.sum_rows(cc);
            let sq = t.square(sr);
            t.sum(sq)
        });
    }

    #[test]
    fn cholesky_solves_and_logdet() {
        let g = rand_mat(4, 4, 6);
        let a = &g * g.transpose() + DMatrix::identity(4, 4);
        let b = rand_mat(4, 3, 7);
        check(&[a, b], |t, v| {
            // symmetrize so perturbing a single entry is a valid symmetric perturbation
            let at = t.transpose(v[0]);
            let s0 = t.add(v[0], at);
            let s = t.scale(s0, 0.5);
            let l = t.cholesky(s).unwrap();
            let x = t.tri_solve(l, v[1], false);
            let y = t.tri_solve(l, x, true);
            let ld = t.log_diag_sum(l);
            let sq = t.square(y);
            let ss = t.sum(sq);
            t.add(ss, ld)
        });
    }

    #[test]
    fn jittered_cholesky_gradient() {
        // rank-deficient blocks only factor after jitter, which scales with the mean diagonal
        let policy = JitterPolicy { start: 1e-2, factor: 10.0, max: 1e-1, pivot_tol: 1e-10 };
        let g = rand_mat(3, 1, 11);
        let w = rand_mat(3, 3, 12);
        let f = |gv: &DMatrix<f64>, group: bool| {
            let mut t = Tape::with_policy(policy);
            let gl = t.leaf(gv.clone());
            let wl = t.leaf(w.clone());
            let gt = t.transpose(gl);
            let a = t.matmul(gl, gt);
            let l = if group { t.group_chol(a, Arc::new(Groups::uniform(1, 3)), 0.0).unwrap() } else { t.cholesky(a).unwrap() };
            let p = t.mul(l, wl);
            let out = t.sum(p);
            let grad = t.backward(out).get_or_zeros(gl, (3, 1));
            (t.scalar(out), grad)
        };
        for group in [false, true] {
            let (_, an) = f(&g, group);
            for i in 0..3 {
                let h = 1e-6;
                let mut up = g.clone();
                up[i] += h;
                let mut dn = g.clone();
                dn[i] -= h;
                let fd = (f(&up, group).0 - f(&dn, group).0) / (2.0 * h);
                assert!((fd - an[i]).abs() < 1e-6 * fd.abs().max(1.0), "{group} {i}: {fd} vs {}", an[i]);
            }
        }
    }

    #[test]
    fn sq_exp_cross_gradient() {
        let a = rand_mat(3, 2, 8);
        let b = rand_mat(4, 2, 9);
        let w = rand_mat(3, 4, 10);
        check(&[a, b, w], |t, v| {
            let k = t.sq_exp_cross(v[0], v[1]);
            let p = t.mul(k, v[2]);
            t.sum(p)
        });
    }

    #[test]
    fn grouped_ops_gradient() {
        let groups = Arc::new(Groups::from_lens(vec![1, 3, 2]));
        let x = rand_mat(6, 2, 11);
        let a = rand_mat(4, 6, 12);
        let eps = rand_mat(6, 1, 13);
        let g2 = groups.clone();
        check(&[x, a, eps], move |t, v| {
            let k = t.group_sq_exp(v[0], g2.clone());
            let gram = t.group_gram(v[1], v[1], g2.clone());
            let blocks = t.add(k, gram);
            let l = t.group_chol(blocks, g2.clone(), 1e-10).unwrap();
            let f = t.group_mat_vec(l, v[2], g2.clone());
            let lme = t.group_log_mean_exp(f, g2.clone());
            t.sum(lme)
        });
    }

    #[test]
    fn group_layout_matches_dense() {
        let groups = Arc::new(Groups::from_lens(vec![2, 3]));
        let x = rand_mat(5, 2, 14);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let k = t.group_sq_exp(xv, groups.clone());
        let dense = sq_exp_cross_value(&x, &x);
        let km = t.value(k);
        for (s, n) in groups.iter() {
            for i in 0..n {
                for j in 0..n {
                    assert!((km[(s + i, j)] - dense[(s + i, s + j)]).abs() < 1e-14);
                }
            }
        }
    }
}
