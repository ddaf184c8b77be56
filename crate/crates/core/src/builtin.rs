//! Named example systems in config text.

use crate::config::parse_system;
use crate::error::Result;
use crate::system::SystemSpec;

pub struct Example {
    pub name: &'static str,
    pub summary: &'static str,
    pub config: &'static str,
}

pub const EXAMPLES: &[Example] = &[
    Example {
        name: "barreira-valls",
        summary: "diag(−(1 + 0.1 t sin t), 1 + 0.1 t sin t) with a quadratic term",
        config: r#"[system]
name = "barreira-valls"
dimension = 2

[matrix]
a_1_1 = "-(1 + 0.1*t*sin(t))"
a_1_2 = "0"
a_2_1 = "0"
a_2_2 = "1 + 0.1*t*sin(t)"

[nonlinearity]
term = { l = [1, 1], j = 1, coeff = "1" }
term = { l = [2, 0], j = 2, coeff = "1" }
"#,
    },
    Example {
        name: "diag-1-2",
        summary: "x' = −x + y², y' = 2y + x²",
        config: r#"[system]
name = "diag-1-2"
dimension = 2

[matrix]
a_1_1 = "-1"
a_1_2 = "0"
a_2_1 = "0"
a_2_2 = "2"

[nonlinearity]
term = { l = [0, 2], j = 1, coeff = "1" }
term = { l = [2, 0], j = 2, coeff = "1" }
"#,
    },
    Example {
        name: "poincare-2d",
        summary: "x' = x, y' = 2y + x² (resonant)",
        config: r#"[system]
name = "poincare-2d"
dimension = 2

[matrix]
a_1_1 = "1"
a_1_2 = "0"
a_2_1 = "0"
a_2_2 = "2"

[nonlinearity]
term = { l = [2, 0], j = 2, coeff = "1" }
"#,
    },
    Example {
        name: "poincare-nonres",
        summary: "x' = x, y' = 3y + x² (non-resonant at degree 2)",
        config: r#"[system]
name = "poincare-nonres"
dimension = 2

[matrix]
a_1_1 = "1"
a_1_2 = "0"
a_2_1 = "0"
a_2_2 = "3"

[nonlinearity]
term = { l = [2, 0], j = 2, coeff = "1" }
"#,
    },
    Example {
        name: "triangular",
        summary: "upper triangular coupling exp(−|t|) between rates −1 and 2",
        config: r#"[system]
name = "triangular"
dimension = 2

[matrix]
a_1_1 = "-1"
a_1_2 = "exp(-abs(t))"
a_2_1 = "0"
a_2_2 = "2"
"#,
    },
    Example {
        name: "scalar-osc",
        summary: "x' = (−1 + 0.5 sin t) x",
        config: r#"[system]
name = "scalar-osc"
dimension = 1

[matrix]
a_1_1 = "-1 + 0.5*sin(t)"
"#,
    },
    Example {
        name: "diag3",
        summary: "diag(−2, 0, 1)",
        config: r#"[system]
name = "diag3"
dimension = 3

[matrix]
a_1_1 = "-2"
a_1_2 = "0"
a_1_3 = "0"
a_2_1 = "0"
a_2_2 = "0"
a_2_3 = "0"
a_3_1 = "0"
a_3_2 = "0"
a_3_3 = "1"
"#,
    },
    Example {
        name: "zero",
        summary: "x' = 0 in two dimensions",
        config: r#"[system]
name = "zero"
dimension = 2

[matrix]
a_1_1 = "0"
a_1_2 = "0"
a_2_1 = "0"
a_2_2 = "0"
"#,
    },
    Example {
        name: "rotation",
        summary: "x' = −y, y' = x",
        config: r#"[system]
name = "rotation"
dimension = 2

[matrix]
a_1_1 = "0"
a_1_2 = "-1"
a_2_1 = "1"
a_2_2 = "0"
"#,
    },
];

pub fn example(name: &str) -> Option<&'static Example> {
    EXAMPLES.iter().find(|e| e.name == name)
}

pub fn example_names() -> Vec<&'static str> {
    EXAMPLES.iter().map(|e| e.name).collect()
}

impl Example {
    pub fn system(&self) -> Result<SystemSpec> {
        Ok(parse_system(self.config)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_example_parses() {
        for e in EXAMPLES {
            let s = e.system().unwrap_or_else(|err| panic!("{}: {err}", e.name));
            assert_eq!(s.name, e.name);
        }
        assert!(example("nope").is_none());
    }
}
