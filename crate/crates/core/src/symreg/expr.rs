use std::fmt;

use thiserror::Error;

/// Denominators with magnitude at or below this make division return 1.
pub const PROTECTED_DIV_THRESHOLD: f64 = 0.001;
/// Every intermediate value is clamped into `[-OVERFLOW_GUARD, OVERFLOW_GUARD]`.
pub const OVERFLOW_GUARD: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let v = match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() <= PROTECTED_DIV_THRESHOLD {
                    1.0
                } else {
                    a / b
                }
            }
        };
        clamp(v)
    }
}

#[inline]
fn clamp(v: f64) -> f64 {
    if v > OVERFLOW_GUARD {
        OVERFLOW_GUARD
    } else if v < -OVERFLOW_GUARD {
        -OVERFLOW_GUARD
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Op(BinaryOp),
    Var(usize),
    Const(f64),
}

impl Node {
    #[inline]
    pub fn arity(&self) -> usize {
        match self {
            Node::Op(_) => 2,
            _ => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.arity() == 0
    }
}

/// Expression tree stored as a prefix-ordered node list.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    nodes: Vec<Node>,
}

impl ExprTree {
    /// Wraps a prefix node list, checking that it encodes exactly one tree.
    pub fn from_prefix(nodes: Vec<Node>) -> Result<Self, ParseError> {
        let mut need = 1usize;
        for (i, n) in nodes.iter().enumerate() {
            if need == 0 {
                return Err(ParseError::new(i, "trailing nodes after a complete tree"));
            }
            need = need - 1 + n.arity();
        }
        if need != 0 || nodes.is_empty() {
            return Err(ParseError::new(nodes.len(), "incomplete tree"));
        }
        if let Some(i) = nodes
            .iter()
            .position(|n| matches!(n, Node::Const(c) if !c.is_finite()))
        {
            return Err(ParseError::new(i, "non-finite constant"));
        }
        Ok(Self { nodes })
    }

    pub(crate) fn from_prefix_unchecked(nodes: Vec<Node>) -> Self {
        debug_assert!(Self::from_prefix(nodes.clone()).is_ok());
        Self { nodes }
    }

    pub fn var(i: usize) -> Self {
        Self { nodes: vec![Node::Var(i)] }
    }

    pub fn constant(c: f64) -> Self {
        Self { nodes: vec![Node::Const(c)] }
    }

    pub fn binary(op: BinaryOp, left: ExprTree, right: ExprTree) -> Self {
        let mut nodes = Vec::with_capacity(1 + left.len() + right.len());
        nodes.push(Node::Op(op));
        nodes.extend(left.nodes);
        nodes.extend(right.nodes);
        Self { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of levels; a lone leaf has depth 1.
    pub fn depth(&self) -> usize {
        let mut stack: Vec<usize> = Vec::with_capacity(16);
        let mut max_depth = 0;
        // remaining child slots per open operator, with its level
        let mut level = 0usize;
        for n in &self.nodes {
            level += 1;
            max_depth = max_depth.max(level);
            if n.arity() > 0 {
                stack.push(n.arity());
            } else {
                while let Some(top) = stack.last_mut() {
                    *top -= 1;
                    if *top == 0 {
                        stack.pop();
                        level -= 1;
                    } else {
                        break;
                    }
                }
                level -= 1;
            }
        }
        max_depth
    }

    /// Largest variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Var(i) => Some(*i),
                _ => None,
            })
            .max()
    }

    /// End (exclusive) of the subtree rooted at `start`.
    pub fn subtree_end(&self, start: usize) -> usize {
        let mut need = 1usize;
        let mut i = start;
        while need > 0 {
            need = need - 1 + self.nodes[i].arity();
            i += 1;
        }
        i
    }

    /// Evaluates at one point. Variable indices must be `< x.len()`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut stack: Vec<f64> = Vec::with_capacity(16);
        for n in self.nodes.iter().rev() {
            match *n {
                Node::Var(i) => stack.push(clamp(x[i])),
                Node::Const(c) => stack.push(c),
                Node::Op(op) => {
                    let a = stack.pop().expect("well-formed tree");
                    let b = stack.pop().expect("well-formed tree");
                    stack.push(op.apply(a, b));
                }
            }
        }
        stack.pop().expect("well-formed tree")
    }

    /// Evaluates over column-major inputs (`columns[j][i]` is feature `j` of row `i`).
    pub fn eval_columns(&self, columns: &[Vec<f64>], n_rows: usize, pool: &mut BufferPool) -> Vec<f64> {
        let mut stack: Vec<Vec<f64>> = Vec::with_capacity(16);
        for node in self.nodes.iter().rev() {
            match *node {
                Node::Var(j) => {
                    let mut buf = pool.take(n_rows);
                    for (o, v) in buf.iter_mut().zip(&columns[j]) {
                        *o = clamp(*v);
                    }
                    stack.push(buf);
                }
                Node::Const(c) => {
                    let mut buf = pool.take(n_rows);
                    buf.iter_mut().for_each(|o| *o = c);
                    stack.push(buf);
                }
                Node::Op(op) => {
                    let mut a = stack.pop().expect("well-formed tree");
                    let b = stack.pop().expect("well-formed tree");
                    match op {
                        BinaryOp::Add => a.iter_mut().zip(&b).for_each(|(x, y)| *x = clamp(*x + y)),
                        BinaryOp::Sub => a.iter_mut().zip(&b).for_each(|(x, y)| *x = clamp(*x - y)),
                        BinaryOp::Mul => a.iter_mut().zip(&b).for_each(|(x, y)| *x = clamp(*x * y)),
                        BinaryOp::Div => a
                            .iter_mut()
                            .zip(&b)
                            .for_each(|(x, y)| *x = BinaryOp::Div.apply(*x, *y)),
                    }
                    pool.give(b);
                    stack.push(a);
                }
            }
        }
        stack.pop().expect("well-formed tree")
    }

    /// Prefix notation, e.g. `sub(X0, add(mul(0.5, X1), mul(0.2, X3)))`.
    pub fn format_prefix(&self) -> String {
        let mut out = String::new();
        self.write_prefix(0, &mut out);
        out
    }

    fn write_prefix(&self, at: usize, out: &mut String) -> usize {
        use std::fmt::Write;
        match self.nodes[at] {
            Node::Var(i) => {
                let _ = write!(out, "X{i}");
                at + 1
            }
            Node::Const(c) => {
                let _ = write!(out, "{c}");
                at + 1
            }
            Node::Op(op) => {
                out.push_str(op.name());
                out.push('(');
                let next = self.write_prefix(at + 1, out);
                out.push_str(", ");
                let next = self.write_prefix(next, out);
                out.push(')');
                next
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut p = Parser {
            s: text.as_bytes(),
            pos: 0,
            nodes: Vec::new(),
        };
        p.expr(0)?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(ParseError::new(p.pos, "unexpected trailing input"));
        }
        Ok(Self { nodes: p.nodes })
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_prefix())
    }
}

impl std::str::FromStr for ExprTree {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

pub fn eval_tree(t: &ExprTree, x: &[f64]) -> f64 {
    t.eval(x)
}

pub fn format_prefix(t: &ExprTree) -> String {
    t.format_prefix()
}

pub fn node_count(t: &ExprTree) -> usize {
    t.node_count()
}

pub fn depth(t: &ExprTree) -> usize {
    t.depth()
}

/// Recycled evaluation buffers.
#[derive(Debug, Default)]
pub struct BufferPool {
    free: Vec<Vec<f64>>,
}

impl BufferPool {
    fn take(&mut self, n: usize) -> Vec<f64> {
        match self.free.pop() {
            Some(mut b) => {
                b.resize(n, 0.0);
                b
            }
            None => vec![0.0; n],
        }
    }

    pub fn give(&mut self, b: Vec<f64>) {
        self.free.push(b);
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("formula parse error at byte {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

impl ParseError {
    fn new(pos: usize, message: &str) -> Self {
        Self {
            pos,
            message: message.into(),
        }
    }
}

const MAX_PARSE_DEPTH: usize = 512;

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    nodes: Vec<Node>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::new(self.pos, &format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self, nesting: usize) -> Result<(), ParseError> {
        if nesting > MAX_PARSE_DEPTH {
            return Err(ParseError::new(self.pos, "formula nested too deeply"));
        }
        self.skip_ws();
        let start = self.pos;
        let Some(&c) = self.s.get(self.pos) else {
            return Err(ParseError::new(self.pos, "unexpected end of input"));
        };
        if c == b'X' {
            self.pos += 1;
            let digits = self.take_while(|b| b.is_ascii_digit());
            let idx: usize = digits
                .parse()
                .map_err(|_| ParseError::new(start, "expected a variable index after `X`"))?;
            self.nodes.push(Node::Var(idx));
            return Ok(());
        }
        if c.is_ascii_alphabetic() {
            let name = self.take_while(|b| b.is_ascii_alphanumeric() || b == b'_');
            let op = BinaryOp::from_name(&name)
                .ok_or_else(|| ParseError::new(start, &format!("unknown function `{name}`")))?;
            self.nodes.push(Node::Op(op));
            self.expect(b'(')?;
            self.expr(nesting + 1)?;
            self.expect(b',')?;
            self.expr(nesting + 1)?;
            self.expect(b')')?;
            return Ok(());
        }
        let num = self.take_while(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
        let v: f64 = num
            .parse()
            .map_err(|_| ParseError::new(start, "expected a number, variable or function"))?;
        if !v.is_finite() {
            return Err(ParseError::new(start, "non-finite constant"));
        }
        self.nodes.push(Node::Const(v));
        Ok(())
    }

    fn take_while(&mut self, f: impl Fn(u8) -> bool) -> String {
        let start = self.pos;
        while self.pos < self.s.len() && f(self.s[self.pos]) {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BinaryOp::*;

    fn v(i: usize) -> ExprTree {
        ExprTree::var(i)
    }

    fn c(x: f64) -> ExprTree {
        ExprTree::constant(x)
    }

    fn bin(op: BinaryOp, a: ExprTree, b: ExprTree) -> ExprTree {
        ExprTree::binary(op, a, b)
    }

    fn concrete_formula() -> ExprTree {
        bin(
            Sub,
            v(0),
            bin(Add, bin(Mul, c(0.5), v(1)), bin(Mul, c(0.2), v(3))),
        )
    }

    #[test]
    fn eval_examples() {
        let t = bin(Add, v(0), bin(Mul, v(1), v(1)));
        assert_eq!(t.eval(&[1.0, 2.0]), 5.0);
        assert_eq!(bin(Div, v(0), v(1)).eval(&[5.0, 0.0005]), 1.0);
        assert_eq!(bin(Div, v(0), v(1)).eval(&[5.0, 0.001]), 1.0);
        assert_eq!(bin(Div, v(0), v(1)).eval(&[5.0, -2.0]), -2.5);
        assert_eq!(concrete_formula().eval(&[1.0, 2.0, 0.0, 5.0]), -1.0);
    }

    #[test]
    fn overflow_is_clamped() {
        let t = bin(Mul, v(0), v(0));
        assert_eq!(t.eval(&[1e200]), OVERFLOW_GUARD);
        let t = bin(Sub, bin(Mul, v(0), v(0)), bin(Mul, v(0), v(0)));
        assert_eq!(t.eval(&[1e200]), 0.0);
        assert_eq!(bin(Mul, v(0), c(-1.0)).eval(&[f64::MAX]), -OVERFLOW_GUARD);
    }

    #[test]
    fn column_eval_matches_row_eval() {
        let t = bin(Div, bin(Add, v(0), c(0.3)), bin(Sub, v(1), v(0)));
        let rows = [[1.0, 2.0], [0.5, 0.5005], [-3.0, 4.0]];
        let cols = vec![rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect()];
        let mut pool = BufferPool::default();
        let out = t.eval_columns(&cols, 3, &mut pool);
        for (r, o) in rows.iter().zip(&out) {
            assert_eq!(t.eval(r), *o);
        }
    }

    #[test]
    fn counts() {
        assert_eq!(v(0).node_count(), 1);
        assert_eq!(v(0).depth(), 1);
        let t = bin(Add, v(0), v(1));
        assert_eq!((t.node_count(), t.depth()), (3, 2));
        let t = concrete_formula();
        assert_eq!((t.node_count(), t.depth()), (9, 4));
        let lopsided = bin(Add, bin(Add, bin(Add, v(0), v(0)), v(0)), v(0));
        assert_eq!(lopsided.depth(), 4);
    }

    #[test]
    fn format_examples() {
        assert_eq!(v(0).format_prefix(), "X0");
        assert_eq!(
            concrete_formula().format_prefix(),
            "sub(X0, add(mul(0.5, X1), mul(0.2, X3)))"
        );
        assert_eq!(c(-0.25).format_prefix(), "-0.25");
    }

    #[test]
    fn parse_round_trip() {
        let s = "add(mul(X1, sub(X0, X2)), div(add(X0, X0), sub(X4, mul(X1, X1))))";
        let t = ExprTree::parse(s).unwrap();
        assert_eq!(t.format_prefix(), s);
        assert_eq!(ExprTree::parse("mul( -1e-3 ,X10)").unwrap(), bin(Mul, c(-0.001), v(10)));
        let t = concrete_formula();
        assert_eq!(ExprTree::parse(&t.format_prefix()).unwrap(), t);
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "add(X0)", "pow(X0, X1)", "X", "add(X0, X1) X2", "add(X0 X1)", "inf"] {
            assert!(ExprTree::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn prefix_validation() {
        assert!(ExprTree::from_prefix(vec![Node::Op(Add), Node::Var(0)]).is_err());
        assert!(ExprTree::from_prefix(vec![Node::Var(0), Node::Var(1)]).is_err());
        assert!(ExprTree::from_prefix(vec![Node::Const(f64::NAN)]).is_err());
        assert!(ExprTree::from_prefix(vec![Node::Op(Add), Node::Var(0), Node::Const(1.0)]).is_ok());
    }

    #[test]
    fn subtree_bounds() {
        let t = concrete_formula();
        assert_eq!(t.subtree_end(0), 9);
        assert_eq!(t.subtree_end(1), 2);
        assert_eq!(t.subtree_end(2), 9);
        assert_eq!(t.subtree_end(3), 6);
    }
}
