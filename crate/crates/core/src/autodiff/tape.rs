//! Reverse-mode automatic differentiation on a thread-local tape.
//!
//! A recording starts with [`reset_tape`]; every arithmetic operation on
//! non-constant [`Var`]s appends a node. [`backward`] sweeps the tape once
//! and returns adjoints for every node. Recordings must not interleave on the
//! same thread.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

const CONST: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
enum Node {
    Leaf,
    Unary(u32, f64),
    Binary(u32, f64, u32, f64),
    Many(u32, u32),
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// Clears the current thread's tape. Variables from earlier recordings are
/// invalidated.
pub fn reset_tape() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.nodes.clear();
        t.edges.clear();
    });
}

pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

fn push(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let idx = t.nodes.len();
        assert!(idx < CONST as usize, "tape overflow");
        t.nodes.push(node);
        idx as u32
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    /// New independent variable on the tape.
    pub fn input(val: f64) -> Self {
        Var {
            idx: push(Node::Leaf),
            val,
        }
    }

    pub fn constant(val: f64) -> Self {
        Var { idx: CONST, val }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    fn unary(val: f64, a: Var, da: f64) -> Var {
        if a.idx == CONST {
            Var::constant(val)
        } else {
            Var {
                idx: push(Node::Unary(a.idx, da)),
                val,
            }
        }
    }

    fn binary(val: f64, a: Var, da: f64, b: Var, db: f64) -> Var {
        match (a.idx == CONST, b.idx == CONST) {
            (true, true) => Var::constant(val),
            (false, true) => Var::unary(val, a, da),
            (true, false) => Var::unary(val, b, db),
            (false, false) => Var {
                idx: push(Node::Binary(a.idx, da, b.idx, db)),
                val,
            },
        }
    }
}

/// Adjoints of one backward sweep.
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adjoints[v.idx as usize]
        }
    }
}

/// Back-propagates from `output` (seed 1) over the current tape.
pub fn backward(output: Var) -> Gradient {
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0; t.nodes.len()];
        if output.idx == CONST {
            return Gradient { adjoints: adj };
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match t.nodes[i] {
                Node::Leaf => {}
                Node::Unary(a, da) => adj[a as usize] += g * da,
                Node::Binary(a, da, b, db) => {
                    adj[a as usize] += g * da;
                    adj[b as usize] += g * db;
                }
                Node::Many(start, len) => {
                    for &(p, d) in &t.edges[start as usize..(start + len) as usize] {
                        adj[p as usize] += g * d;
                    }
                }
            }
        }
        Gradient { adjoints: adj }
    })
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        Var::binary(self.val + rhs.val, self, 1.0, rhs, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        Var::binary(self.val - rhs.val, self, 1.0, rhs, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        Var::binary(self.val * rhs.val, self, rhs.val, rhs, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let inv = 1.0 / rhs.val;
        let val = self.val * inv;
        Var::binary(val, self, inv, rhs, -val * inv)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::unary(-self.val, self, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        Var::unary(self.val + rhs, self, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    fn sub(self, rhs: f64) -> Var {
        Var::unary(self.val - rhs, self, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        Var::unary(self.val * rhs, self, rhs)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    fn div(self, rhs: f64) -> Var {
        Var::unary(self.val / rhs, self, 1.0 / rhs)
    }
}

impl Scalar for Var {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn custom(value: f64, partials: &[(Self, f64)]) -> Self {
        let live: Vec<(u32, f64)> = partials
            .iter()
            .filter(|(v, d)| v.idx != CONST && *d != 0.0)
            .map(|(v, d)| (v.idx, *d))
            .collect();
        match live.len() {
            0 => Var::constant(value),
            1 => Var {
                idx: push(Node::Unary(live[0].0, live[0].1)),
                val: value,
            },
            _ => {
                let idx = TAPE.with(|t| {
                    let mut t = t.borrow_mut();
                    let start = t.edges.len() as u32;
                    t.edges.extend_from_slice(&live);
                    let idx = t.nodes.len() as u32;
                    t.nodes.push(Node::Many(start, live.len() as u32));
                    idx
                });
                Var { idx, val: value }
            }
        }
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Var::unary(s, self, 0.5 / s)
    }

    fn ln(self) -> Self {
        Var::unary(self.val.ln(), self, 1.0 / self.val)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        Var::unary(e, self, e)
    }

    fn sin(self) -> Self {
        Var::unary(self.val.sin(), self, self.val.cos())
    }

    fn cos(self) -> Self {
        Var::unary(self.val.cos(), self, -self.val.sin())
    }
}
