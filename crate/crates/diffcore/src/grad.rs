//! Reverse sweep over a [`Tape`].

use ndarray::{s, Axis as NdAxis, Zip};

use crate::error::{DiffError, Result, Shape};
use crate::tape::{shape_of, sigmoid, zip_broadcast, Array, Axis, Op, Tape, Var};

/// Gradients of a scalar loss, one entry per requested node, in request order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: Vec<(Var, Array)>,
}

impl GradientMap {
    pub fn from_entries(entries: Vec<(Var, Array)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, v: Var) -> Option<&Array> {
        self.entries.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Var, Array)> {
        self.entries.iter()
    }

    pub fn arrays(&self) -> impl Iterator<Item = &Array> {
        self.entries.iter().map(|(_, g)| g)
    }

    pub fn into_arrays(self) -> Vec<Array> {
        self.entries.into_iter().map(|(_, g)| g).collect()
    }

    pub(crate) fn map_arrays(&self, f: impl Fn(&Array) -> Array) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, g)| (*k, f(g))).collect(),
        }
    }

    /// Global L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.arrays()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array, shape: Shape) -> Array {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(NdAxis(1)).insert_axis(NdAxis(1));
    }
    g
}

impl Tape {
    /// Exact reverse-mode gradients of the scalar `loss` with respect to `params`.
    ///
    /// Parameters the loss does not depend on receive an all-zero gradient.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<GradientMap> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(DiffError::UnknownNode(loss.0));
        }
        for p in params {
            if p.0 >= n {
                return Err(DiffError::UnknownNode(p.0));
            }
        }
        let loss_shape = self.shape(loss);
        if loss_shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(loss_shape));
        }

        let mut wanted = vec![false; n];
        for p in params {
            wanted[p.0] = true;
        }
        let mut found: Vec<Option<Array>> = vec![None; n];
        let mut grads: Vec<Option<Array>> = vec![None; n];
        grads[loss.0] = Some(Array::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            for p in &node.parents {
                if p.0 >= id {
                    return Err(DiffError::Cycle {
                        node: id,
                        parent: p.0,
                    });
                }
            }
            let Some(g) = grads[id].take() else { continue };
            if wanted[id] {
                found[id] = Some(g.clone());
            }
            if !node.requires_grad {
                continue;
            }
            for (parent, contrib) in self.backprop(id, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let entries = params
            .iter()
            .map(|p| {
                let g = found[p.0]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(self.shape(*p)));
                (*p, g)
            })
            .collect();
        Ok(GradientMap { entries })
    }

    /// Vector-Jacobian products of node `id` for each parent that needs one.
    fn backprop(&self, id: usize, g: &Array) -> Vec<(Var, Array)> {
        let node = &self.nodes[id];
        let ps = &node.parents;
        let needs = |i: usize| self.nodes[ps[i].0].requires_grad;
        let val = |i: usize| &self.nodes[ps[i].0].value;
        let out = &node.value;
        let mut res = Vec::with_capacity(ps.len());

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add | Op::Sub | Op::Mul => {
                let shape = shape_of(out);
                for i in 0..2 {
                    if !needs(i) {
                        continue;
                    }
                    let local = match node.op {
                        Op::Add => g.clone(),
                        Op::Sub if i == 0 => g.clone(),
                        Op::Sub => g.mapv(|x| -x),
                        _ => zip_broadcast(g, val(1 - i), shape, |gx, o| gx * o),
                    };
                    res.push((ps[i], reduce_to(local, val(i).dim())));
                }
            }
            Op::Neg => res.push((ps[0], g.mapv(|x| -x))),
            Op::Scale(c) => {
                let c = *c;
                res.push((ps[0], g.mapv(|x| c * x)));
            }
            Op::Offset(_) => res.push((ps[0], g.clone())),
            Op::MatMul => {
                if needs(0) {
                    res.push((ps[0], g.dot(&val(1).t())));
                }
                if needs(1) {
                    res.push((ps[1], val(0).t().dot(g)));
                }
            }
            Op::Tanh => res.push((ps[0], Zip::from(g).and(out).map_collect(|&g, &y| g * (1.0 - y * y)))),
            Op::Sigmoid => res.push((ps[0], Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y)))),
            Op::Softplus => res.push((ps[0], Zip::from(g).and(val(0)).map_collect(|&g, &x| g * sigmoid(x)))),
            Op::Elu => res.push((
                ps[0],
                Zip::from(g)
                    .and(val(0))
                    .and(out)
                    .map_collect(|&g, &x, &y| if x > 0.0 { g } else { g * (y + 1.0) }),
            )),
            Op::Exp => res.push((ps[0], Zip::from(g).and(out).map_collect(|&g, &y| g * y))),
            Op::Log => res.push((ps[0], Zip::from(g).and(val(0)).map_collect(|&g, &x| g / x))),
            Op::Square => res.push((ps[0], Zip::from(g).and(val(0)).map_collect(|&g, &x| 2.0 * x * g))),
            Op::Sum => res.push((ps[0], Array::from_elem(val(0).dim(), g[[0, 0]]))),
            Op::Mean => {
                let a = val(0);
                res.push((ps[0], Array::from_elem(a.dim(), g[[0, 0]] / a.len() as f64)));
            }
            Op::SumCols => {
                let shape = val(0).dim();
                res.push((ps[0], g.broadcast(shape).expect("column gradient").to_owned()));
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for (i, p) in ps.iter().enumerate() {
                    let (r, c) = val(i).dim();
                    if needs(i) {
                        let part = match axis {
                            Axis::Rows => g.slice(s![offset..offset + r, ..]).to_owned(),
                            Axis::Cols => g.slice(s![.., offset..offset + c]).to_owned(),
                        };
                        res.push((*p, part));
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { axis, start, end } => {
                let mut full = Array::zeros(val(0).dim());
                match axis {
                    Axis::Rows => full.slice_mut(s![*start..*end, ..]).assign(g),
                    Axis::Cols => full.slice_mut(s![.., *start..*end]).assign(g),
                }
                res.push((ps[0], full));
            }
            Op::GaussianSample(noise) => {
                if needs(0) {
                    res.push((ps[0], g.clone()));
                }
                if needs(1) {
                    res.push((ps[1], Zip::from(g).and(noise).map_collect(|&g, &e| g * e)));
                }
            }
            Op::GaussianLogDensity => {
                let (x, m, sd) = (val(0), val(1), val(2));
                let gb = g.broadcast(x.dim()).expect("row gradient");
                // d/dx = -z/s, d/dm = z/s, d/ds = (z^2 - 1)/s with z = (x - m)/s
                let dm = Zip::from(&gb)
                    .and(x)
                    .and(m)
                    .and(sd)
                    .map_collect(|&g, &x, &m, &s| g * (x - m) / (s * s));
                if needs(0) {
                    res.push((ps[0], dm.mapv(|v| -v)));
                }
                if needs(2) {
                    let ds = Zip::from(&gb)
                        .and(x)
                        .and(m)
                        .and(sd)
                        .map_collect(|&g, &x, &m, &s| {
                            let z = (x - m) / s;
                            g * (z * z - 1.0) / s
                        });
                    res.push((ps[2], ds));
                }
                if needs(1) {
                    res.push((ps[1], dm));
                }
            }
            Op::GaussianKl => {
                let (mq, sq, mp, sp) = (val(0), val(1), val(2), val(3));
                let gb = g.broadcast(mq.dim()).expect("row gradient");
                let dmq = Zip::from(&gb)
                    .and(mq)
                    .and(mp)
                    .and(sp)
                    .map_collect(|&g, &mq, &mp, &sp| g * (mq - mp) / (sp * sp));
                if needs(1) {
                    let dsq = Zip::from(&gb)
                        .and(sq)
                        .and(sp)
                        .map_collect(|&g, &sq, &sp| g * (sq / (sp * sp) - 1.0 / sq));
                    res.push((ps[1], dsq));
                }
                if needs(3) {
                    let mut dsp = Array::zeros(mq.dim());
                    Zip::from(&mut dsp)
                        .and(&gb)
                        .and(mq)
                        .and(sq)
                        .and(mp)
                        .and(sp)
                        .for_each(|o, &g, &mq, &sq, &mp, &sp| {
                            let d = mq - mp;
                            *o = g * (1.0 / sp - (sq * sq + d * d) / (sp * sp * sp));
                        });
                    res.push((ps[3], dsp));
                }
                if needs(2) {
                    res.push((ps[2], dmq.mapv(|v| -v)));
                }
                if needs(0) {
                    res.push((ps[0], dmq));
                }
            }
        }
        res
    }
}
