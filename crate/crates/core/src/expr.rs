//! Scalar expressions in the chart coordinates `x1, ..., xm`.
//!
//! Parsing and evaluation are delegated to `evalexpr`. Integer literals are
//! promoted to floats before parsing so that `1/2` means one half.

use std::sync::Arc;

use evalexpr::error::EvalexprResultValue;
use evalexpr::{build_operator_tree, Context, DefaultNumericTypes, EvalexprError, EvalexprResult, Node, Value};

use crate::error::{Error, Result};

type V = Value<DefaultNumericTypes>;

/// A compiled expression in `dim` coordinate variables.
#[derive(Clone)]
pub struct Expr {
    source: String,
    dim: usize,
    tree: Arc<Node<DefaultNumericTypes>>,
}

impl std::fmt::Debug for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Expr").field("source", &self.source).finish()
    }
}

struct CoordContext {
    values: Vec<V>,
    pi: V,
}

impl Context for CoordContext {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&V> {
        if identifier == "pi" {
            return Some(&self.pi);
        }
        let idx: usize = identifier.strip_prefix('x')?.parse().ok()?;
        if idx == 0 {
            return None;
        }
        self.values.get(idx - 1)
    }

    fn call_function(&self, identifier: &str, argument: &V) -> EvalexprResultValue<DefaultNumericTypes> {
        let a = argument.as_number()?;
        let r = match identifier {
            "sin" => a.sin(),
            "cos" => a.cos(),
            "tan" => a.tan(),
            "exp" => a.exp(),
            "ln" => a.ln(),
            "sqrt" => a.sqrt(),
            "abs" => a.abs(),
            "sinh" => a.sinh(),
            "cosh" => a.cosh(),
            "tanh" => a.tanh(),
            _ => return Err(EvalexprError::FunctionIdentifierNotFound(identifier.to_string())),
        };
        Ok(Value::Float(r))
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, _disabled: bool) -> EvalexprResult<(), DefaultNumericTypes> {
        Err(EvalexprError::ContextNotMutable)
    }
}

/// Appends `.0` to bare integer literals.
fn promote_integers(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit()
            && (i == 0 || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.'));
        if starts_number {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            out.extend(&chars[i..j]);
            let next = chars.get(j).copied();
            if !matches!(next, Some('.') | Some('e') | Some('E')) {
                out.push_str(".0");
            }
            i = j;
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

impl Expr {
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(&promote_integers(source))
            .map_err(|e| Error::Expression(format!("{source:?}: {e}")))?;
        for ident in tree.iter_variable_identifiers() {
            let ok = ident == "pi"
                || ident
                    .strip_prefix('x')
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|k| k >= 1 && k <= dim);
            if !ok {
                return Err(Error::Expression(format!(
                    "{source:?}: unknown variable `{ident}` (expected x1..x{dim} or pi)"
                )));
            }
        }
        let e = Expr {
            source: source.to_string(),
            dim,
            tree: Arc::new(tree),
        };
        let probe = vec![0.5; dim];
        e.eval(&probe)?;
        Ok(e)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("expression expects {} coordinates", self.dim)));
        }
        let ctx = CoordContext {
            values: x.iter().map(|&v| Value::Float(v)).collect(),
            pi: Value::Float(std::f64::consts::PI),
        };
        self.tree
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::Expression(format!("{:?}: {e}", self.source)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_division_is_real() {
        let e = Expr::parse("1/2 + x1", 1).unwrap();
        assert_eq!(e.eval(&[0.25]).unwrap(), 0.75);
    }

    #[test]
    fn functions_and_constants() {
        let e = Expr::parse("sin(x1)^2 + cos(x1)^2 + 0*pi + exp(0)", 2).unwrap();
        assert!((e.eval(&[0.3, 1.0]).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn unknown_variable_is_rejected() {
        assert!(Expr::parse("x3 + 1", 2).is_err());
        assert!(Expr::parse("y + 1", 2).is_err());
    }

    #[test]
    fn promotion_keeps_identifiers_and_floats() {
        assert_eq!(promote_integers("x12*2+0.5"), "x12*2.0+0.5");
    }
}
