//! Reverse-mode differentiation over small dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`Params`] store and are read in place; [`Tape::backward`] accumulates
//! their gradients into a [`Gradients`] buffer of matching shapes. Row vectors
//! are `1 × n` matrices and scalars are `1 × 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Encoder and classification head.
    Main,
    /// Tree Number decoder and the task-weighting scalars.
    Decoder,
    /// Probe parameters.
    Probe,
}

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    groups: Vec<Group>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn add(&mut self, name: &str, group: Group, value: Mat) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.groups.push(group);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect(),
        }
    }
}

/// Gradient buffer aligned with a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Mat>,
}

/// One forward pass.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax; entries at `-inf` get weight 0 and an all `-inf` row
/// stays zero.
fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Constant, m)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Rows `rows` of an embedding table, without materialising the table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(id);
        let mut out = Mat::zeros((rows.len(), table.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).assign(&table.row(r));
        }
        self.push(Op::Gather(id, rows.to_vec()), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    /// `a (r × c) + b (1 × c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::AddRow(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// `ln(1 + e^a)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Row-wise softmax. Masked columns (`mask[c] == false`) get zero weight;
    /// a row with every column masked is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let mut logits = self.value(a).clone();
        if let Some(mask) = mask {
            assert_eq!(mask.len(), logits.ncols());
            for mut row in logits.rows_mut() {
                for (x, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *x = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let v = softmax_rows(&logits);
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let x = self.value(a)[[row, col]];
        self.push(Op::Pick(a, row, col), Mat::from_elem((1, 1), x))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Mat::zeros((rows.len(), src.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).assign(&src.row(r));
        }
        self.push(Op::SelectRows(a, rows.to_vec()), out)
    }

    /// Mean of the listed rows as a `1 × c` row; zeros when `rows` is empty.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Mat::zeros((1, src.ncols()));
        for &r in rows {
            out.row_mut(0).scaled_add(1.0, &src.row(r));
        }
        if !rows.is_empty() {
            out.mapv_inplace(|v| v / rows.len() as f64);
        }
        self.push(Op::MeanRows(a, rows.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Op::Sum(a), Mat::from_elem((1, 1), v))
    }

    /// Accumulates `scale * d(root)/d(param)` into `grads`. `root` must be a scalar.
    pub fn backward(&self, root: Var, scale: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::from_elem((1, 1), scale));
        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => *grads.get_mut(*id) += &g,
                Op::Gather(id, rows) => {
                    let target = grads.get_mut(*id);
                    for (k, &r) in rows.iter().enumerate() {
                        target.row_mut(r).scaled_add(1.0, &g.row(k));
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *b, gb);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Affine(a, scale) => acc(&mut adj, *a, g * *scale),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= yv * (1.0 - yv));
                    acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g * node.value.as_ref().unwrap();
                    acc(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    acc(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        *gv *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g * self.value(*a) * 2.0;
                    acc(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = Mat::zeros(y.raw_dim());
                    for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g.clone();
                    for (mut out, (yr, gr)) in ga.rows_mut().into_iter().zip(y.rows().into_iter().zip(g.rows())) {
                        let total = gr.sum();
                        for (o, &yv) in out.iter_mut().zip(yr.iter()) {
                            *o -= yv.exp() * total;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga[[*r, *c]] = g[[0, 0]];
                    acc(&mut adj, *a, ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        ga.row_mut(r).scaled_add(1.0, &g.row(k));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::MeanRows(a, rows) => {
                    if rows.is_empty() {
                        continue;
                    }
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        ga.row_mut(r).scaled_add(w, &g.row(0));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut adj, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut adj, *a, ga);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of every parameter.
    fn numeric(params: &Params, f: &dyn Fn(&Params) -> f64) -> Vec<Mat> {
        let eps = 1e-6;
        let mut out = Vec::new();
        for id in params.ids() {
            let mut g = Mat::zeros(params.get(id).raw_dim());
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut p = params.clone();
                p.get_mut(id)[[r, c]] += eps;
                let up = f(&p);
                p.get_mut(id)[[r, c]] -= 2.0 * eps;
                let down = f(&p);
                g[[r, c]] = (up - down) / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    fn check(params: &Params, build: &dyn Fn(&mut Tape) -> Var) {
        let f = |p: &Params| {
            let mut t = Tape::new(p);
            let root = build(&mut t);
            t.scalar(root)
        };
        let mut grads = params.zero_grads();
        let mut t = Tape::new(params);
        let root = build(&mut t);
        t.backward(root, 1.0, &mut grads);
        for (id, num) in params.ids().zip(numeric(params, &f)) {
            let ana = grads.get(id);
            for (a, n) in ana.iter().zip(num.iter()) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{}: {a} vs {n}", params.name(id));
            }
        }
    }

    fn sample_params() -> Params {
        let mut p = Params::default();
        p.add("a", Group::Main, array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]]);
        p.add("b", Group::Main, array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.6]]);
        p.add("row", Group::Main, array![[0.1, -0.3]]);
        p.add("table", Group::Decoder, array![[0.1, 0.2, 0.3], [0.9, -0.5, 0.1], [0.0, 0.7, -0.2]]);
        p
    }

    #[test]
    fn matmul_tanh_sigmoid_chain() {
        let p = sample_params();
        check(&p, &|t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let r = t.param(ParamId(2));
            let ab = t.matmul(a, b);
            let h = t.add_row(ab, r);
            let h = t.tanh(h);
            let s = t.sigmoid(h);
            let e = t.exp(s);
            let sp = t.softplus(e);
            let m = t.mul(sp, h);
            t.sum(m)
        });
    }

    #[test]
    fn softmax_logsoftmax_and_selection() {
        let p = sample_params();
        check(&p, &|t| {
            let a = t.param(ParamId(0));
            let tab = t.gather(ParamId(3), &[2, 0, 2]);
            let at = t.transpose(a);
            let scores = t.matmul(tab, at); // 3 × 2
            let sm = t.softmax_rows(scores, Some(&[true, false]));
            let x = t.concat_cols(&[sm, scores]);
            let ls = t.log_softmax_rows(x);
            let picked = t.pick(ls, 1, 3);
            let mean = t.mean_rows(ls, &[0, 2]);
            let sl = t.slice_cols(mean, 1, 3);
            let sq = t.square(sl);
            let rows = t.select_rows(scores, &[1]);
            let stacked = t.concat_rows(&[rows, sq]);
            let total = t.sum(stacked);
            let total = t.sub(total, picked);
            t.affine(total, 2.0, 1.0)
        });
    }

    #[test]
    fn fully_masked_softmax_is_zero_with_zero_gradient() {
        let p = sample_params();
        let mut t = Tape::new(&p);
        let r = t.param(ParamId(2));
        let sm = t.softmax_rows(r, Some(&[false, false]));
        assert!(t.value(sm).iter().all(|&v| v == 0.0));
        let s = t.sum(sm);
        let mut g = p.zero_grads();
        t.backward(s, 1.0, &mut g);
        assert!(g.get(ParamId(2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stable_activations_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
    }
}
