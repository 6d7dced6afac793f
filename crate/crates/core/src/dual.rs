//! Values paired with an optional time tangent, both recorded on a [`Graph`].
//!
//! Every helper applies the chain rule with ordinary tape ops, so reverse
//! mode can differentiate a loss that depends on the tangent itself.

use std::rc::Rc;

use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: Var,
    pub t: Option<Var>,
}

impl Dual {
    pub fn value(v: Var) -> Self {
        Dual { v, t: None }
    }

    pub fn new(v: Var, t: Var) -> Self {
        Dual { v, t: Some(t) }
    }

    pub fn detach_tangent(self) -> Self {
        Dual { v: self.v, t: None }
    }
}

fn add_opt(g: &mut Graph, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(x), Some(y)) => Some(g.add(x, y)),
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(y),
        (None, None) => None,
    }
}

pub fn constant(g: &mut Graph, value: Tensor, tangent: Option<Tensor>) -> Dual {
    let v = g.constant(value);
    let t = tangent.map(|t| g.constant(t));
    Dual { v, t }
}

pub fn add(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let v = g.add(a.v, b.v);
    let t = add_opt(g, a.t, b.t);
    Dual { v, t }
}

pub fn sub(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let v = g.sub(a.v, b.v);
    let t = match (a.t, b.t) {
        (Some(x), Some(y)) => Some(g.sub(x, y)),
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(g.neg(y)),
        (None, None) => None,
    };
    Dual { v, t }
}

pub fn mul(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let v = g.mul(a.v, b.v);
    let ta = a.t.map(|at| g.mul(at, b.v));
    let tb = b.t.map(|bt| g.mul(a.v, bt));
    let t = add_opt(g, ta, tb);
    Dual { v, t }
}

pub fn div(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let v = g.div(a.v, b.v);
    // (a/b)' = a'/b - (a/b) b'/b
    let ta = a.t.map(|at| g.div(at, b.v));
    let tb = b.t.map(|bt| {
        let q = g.div(bt, b.v);
        let q = g.mul(v, q);
        g.neg(q)
    });
    let t = add_opt(g, ta, tb);
    Dual { v, t }
}

pub fn scale(g: &mut Graph, a: Dual, k: f64) -> Dual {
    let v = g.scale(a.v, k);
    let t = a.t.map(|x| g.scale(x, k));
    Dual { v, t }
}

pub fn offset(g: &mut Graph, a: Dual, k: f64) -> Dual {
    let v = g.offset(a.v, k);
    Dual { v, t: a.t }
}

pub fn neg(g: &mut Graph, a: Dual) -> Dual {
    scale(g, a, -1.0)
}

pub fn square(g: &mut Graph, a: Dual) -> Dual {
    let v = g.square(a.v);
    let t = a.t.map(|x| {
        let p = g.mul(a.v, x);
        g.scale(p, 2.0)
    });
    Dual { v, t }
}

pub fn sqrt(g: &mut Graph, a: Dual) -> Dual {
    let v = g.sqrt(a.v);
    let t = a.t.map(|x| {
        let q = g.div(x, v);
        g.scale(q, 0.5)
    });
    Dual { v, t }
}

pub fn recip(g: &mut Graph, a: Dual) -> Dual {
    let v = g.recip(a.v);
    let t = a.t.map(|x| {
        let v2 = g.square(v);
        let p = g.mul(x, v2);
        g.neg(p)
    });
    Dual { v, t }
}

pub fn exp(g: &mut Graph, a: Dual) -> Dual {
    let v = g.exp(a.v);
    let t = a.t.map(|x| g.mul(v, x));
    Dual { v, t }
}

pub fn ln(g: &mut Graph, a: Dual) -> Dual {
    let v = g.ln(a.v);
    let t = a.t.map(|x| g.div(x, a.v));
    Dual { v, t }
}

pub fn sin(g: &mut Graph, a: Dual) -> Dual {
    let v = g.sin(a.v);
    let t = a.t.map(|x| {
        let c = g.cos(a.v);
        g.mul(c, x)
    });
    Dual { v, t }
}

pub fn cos(g: &mut Graph, a: Dual) -> Dual {
    let v = g.cos(a.v);
    let t = a.t.map(|x| {
        let s = g.sin(a.v);
        let p = g.mul(s, x);
        g.neg(p)
    });
    Dual { v, t }
}

pub fn softplus(g: &mut Graph, a: Dual) -> Dual {
    let v = g.softplus(a.v);
    let t = a.t.map(|x| g.softplus_jvp(a.v, x));
    Dual { v, t }
}

pub fn sigmoid(g: &mut Graph, a: Dual) -> Dual {
    let v = g.sigmoid(a.v);
    let t = a.t.map(|x| {
        let one_minus = g.scale(v, -1.0);
        let one_minus = g.offset(one_minus, 1.0);
        let d = g.mul(v, one_minus);
        g.mul(d, x)
    });
    Dual { v, t }
}

pub fn clamp_min(g: &mut Graph, a: Dual, lo: f64) -> Dual {
    let v = g.clamp_min(a.v, lo);
    let t = a.t.map(|x| {
        let mask = g.value(a.v).map(|z| if z > lo { 1.0 } else { 0.0 });
        let m = g.constant(mask);
        g.mul(m, x)
    });
    Dual { v, t }
}

/// `x W + b`; the tangent is `dx W`.
pub fn linear(g: &mut Graph, x: Dual, w: Var, b: Var) -> Dual {
    let v = g.linear(x.v, w, b);
    let t = x.t.map(|dx| g.matmul(dx, w));
    Dual { v, t }
}

pub fn matmul_const(g: &mut Graph, x: Dual, m: Var) -> Dual {
    let v = g.matmul(x.v, m);
    let t = x.t.map(|dx| g.matmul(dx, m));
    Dual { v, t }
}

pub fn sum_cols(g: &mut Graph, a: Dual) -> Dual {
    let v = g.sum_cols(a.v);
    let t = a.t.map(|x| g.sum_cols(x));
    Dual { v, t }
}

pub fn cumsum_exclusive(g: &mut Graph, a: Dual) -> Dual {
    let v = g.cumsum_exclusive(a.v);
    let t = a.t.map(|x| g.cumsum_exclusive(x));
    Dual { v, t }
}

pub fn concat(g: &mut Graph, parts: &[Dual]) -> Dual {
    let vs: Vec<Var> = parts.iter().map(|p| p.v).collect();
    let v = g.concat(&vs);
    let t = if parts.iter().any(|p| p.t.is_some()) {
        let ts: Vec<Var> = parts
            .iter()
            .map(|p| match p.t {
                Some(t) => t,
                None => {
                    let (r, c) = g.shape(p.v);
                    g.constant(Tensor::zeros(r, c))
                }
            })
            .collect();
        Some(g.concat(&ts))
    } else {
        None
    };
    Dual { v, t }
}

pub fn slice(g: &mut Graph, a: Dual, start: usize, end: usize) -> Dual {
    let v = g.slice(a.v, start, end);
    let t = a.t.map(|x| g.slice(x, start, end));
    Dual { v, t }
}

pub fn gather_rows(g: &mut Graph, a: Dual, index: Rc<[usize]>) -> Dual {
    let v = g.gather_rows(a.v, index.clone());
    let t = a.t.map(|x| g.gather_rows(x, index));
    Dual { v, t }
}

pub fn reshape(g: &mut Graph, a: Dual, rows: usize, cols: usize) -> Dual {
    let v = g.reshape(a.v, rows, cols);
    let t = a.t.map(|x| g.reshape(x, rows, cols));
    Dual { v, t }
}
