//! User expressions in the variables `t`, `x`, `y`, `s`, backed by `evalexpr`.

use evalexpr::{
    build_operator_tree, Context, DefaultNumericTypes, EvalexprError, EvalexprResult, Node, Value,
};

use crate::error::{Error, Result};

const VARIABLES: [&str; 4] = ["t", "x", "y", "s"];

/// Integer literals become floats so that `1/2` means one half.
fn promote_integers(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit()
            && (i == 0
                || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.'));
        if !starts_number {
            out.push(c);
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        out.extend(&chars[start..i]);
        let continues = i < chars.len() && matches!(chars[i], '.' | 'e' | 'E');
        if !continues {
            out.push_str(".0");
        }
    }
    out
}

struct Point {
    values: [Value<DefaultNumericTypes>; 4],
}

fn unary(name: &str) -> Option<fn(f64) -> f64> {
    Some(match name {
        "exp" => f64::exp,
        "ln" => f64::ln,
        "sqrt" => f64::sqrt,
        "abs" => f64::abs,
        "sin" => f64::sin,
        "cos" => f64::cos,
        "tanh" => f64::tanh,
        _ => return None,
    })
}

impl Context for Point {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&Value> {
        VARIABLES
            .iter()
            .position(|v| *v == identifier)
            .map(|k| &self.values[k])
    }

    fn call_function(&self, identifier: &str, argument: &Value) -> EvalexprResult<Value> {
        let f = unary(identifier)
            .ok_or_else(|| EvalexprError::FunctionIdentifierNotFound(identifier.to_string()))?;
        Ok(Value::Float(f(argument.as_number()?)))
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, _disabled: bool) -> EvalexprResult<()> {
        Err(EvalexprError::CustomMessage(
            "builtin functions cannot be toggled".into(),
        ))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Expr {
    source: String,
    tree: Node,
    uses: [bool; 4],
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(&promote_integers(source))
            .map_err(|e| Error::config(format!("cannot parse expression '{source}': {e}")))?;
        let mut uses = [false; 4];
        for id in tree.iter_read_variable_identifiers() {
            match VARIABLES.iter().position(|v| *v == id) {
                Some(k) => uses[k] = true,
                None => {
                    return Err(Error::config(format!(
                        "expression '{source}': unknown variable '{id}' (allowed: t, x, y, s)"
                    )))
                }
            }
        }
        for id in tree.iter_function_identifiers() {
            if unary(id).is_none() && !id.starts_with("math::") {
                return Err(Error::config(format!(
                    "expression '{source}': unknown function '{id}'"
                )));
            }
        }
        let e = Expr {
            source: source.to_string(),
            tree,
            uses,
        };
        // catch type errors such as boolean results early
        e.try_eval(0.0, [0.0; 2], 0.0)?;
        Ok(e)
    }

    pub fn uses_time(&self) -> bool {
        self.uses[0]
    }

    pub fn uses_action(&self) -> bool {
        self.uses[3]
    }

    fn try_eval(&self, t: f64, x: [f64; 2], s: f64) -> Result<f64> {
        let ctx = Point {
            values: [
                Value::Float(t),
                Value::Float(x[0]),
                Value::Float(x[1]),
                Value::Float(s),
            ],
        };
        self.tree.eval_number_with_context(&ctx).map_err(|e| {
            Error::config(format!("cannot evaluate expression '{}': {e}", self.source))
        })
    }

    /// Value at `(t, x, s)`; evaluation failures surface as NaN.
    pub fn eval(&self, t: f64, x: [f64; 2], s: f64) -> f64 {
        self.try_eval(t, x, s).unwrap_or(f64::NAN)
    }
}
