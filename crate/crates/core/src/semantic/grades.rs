use std::path::Path;

use crate::error::{GazeError, Result};

pub const GRADE_PLACEHOLDER: &str = "{grade}";
pub const DEFAULT_TEMPLATE: &str = "The directions of gaze in the two photos are {grade}.";

const K2: &str = include_str!("../../data/grades_k2.txt");
const K3: &str = include_str!("../../data/grades_k3.txt");
const K5: &str = include_str!("../../data/grades_k5.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct Grade {
    pub lo: f64,
    pub hi: f64,
    pub name: String,
}

/// Half-open radian intervals `[lo, hi)` partitioning `[0, inf)`, each with
/// a grade name, plus the prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeScheme {
    grades: Vec<Grade>,
    template: String,
}

impl GradeScheme {
    pub fn new(grades: Vec<Grade>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if grades.is_empty() {
            return Err(GazeError::config("grade scheme has no grades"));
        }
        if grades[0].lo != 0.0 {
            return Err(GazeError::config(format!(
                "first grade must start at 0, starts at {}",
                grades[0].lo
            )));
        }
        for w in grades.windows(2) {
            if w[0].hi != w[1].lo {
                return Err(GazeError::config(format!(
                    "grades '{}' and '{}' are not contiguous ({} vs {})",
                    w[0].name, w[1].name, w[0].hi, w[1].lo
                )));
            }
        }
        for g in &grades {
            if !(g.lo < g.hi) {
                return Err(GazeError::config(format!(
                    "grade '{}' has an empty interval [{}, {})",
                    g.name, g.lo, g.hi
                )));
            }
            if g.name.trim().is_empty() {
                return Err(GazeError::config("grade names must be non-empty"));
            }
        }
        if grades.last().is_some_and(|g| g.hi != f64::INFINITY) {
            return Err(GazeError::config("last grade must extend to inf"));
        }
        if template.matches(GRADE_PLACEHOLDER).count() != 1 {
            return Err(GazeError::config(format!(
                "template must contain {GRADE_PLACEHOLDER} exactly once: {template:?}"
            )));
        }
        Ok(Self { grades, template })
    }

    /// One of the shipped schemes with `k` in {2, 3, 5}.
    pub fn builtin(k: usize) -> Result<Self> {
        let text = match k {
            2 => K2,
            3 => K3,
            5 => K5,
            other => {
                return Err(GazeError::config(format!(
                    "no built-in grade scheme with {other} grades (expected 2, 3 or 5)"
                )))
            }
        };
        Self::parse(text, Path::new(&format!("<grades_k{k}>")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GazeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Parses `lo hi name` lines, an optional `template ...` line and `#`
    /// comments. `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut grades = Vec::new();
        let mut template = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| GazeError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            if let Some(rest) = line.strip_prefix("template ") {
                template = Some(rest.trim().to_string());
                continue;
            }
            let mut parts = line.splitn(3, char::is_whitespace);
            let (lo, hi, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(lo), Some(hi), Some(name)) if !name.trim().is_empty() => (lo, hi, name.trim()),
                _ => return Err(err(format!("expected `lo hi name`, got {line:?}"))),
            };
            let bound = |s: &str| -> Result<f64> {
                match s {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    _ => s
                        .parse::<f64>()
                        .map_err(|e| err(format!("bad bound {s:?}: {e}"))),
                }
            };
            grades.push(Grade {
                lo: bound(lo)?,
                hi: bound(hi)?,
                name: name.to_string(),
            });
        }
        Self::new(grades, template.unwrap_or_else(|| DEFAULT_TEMPLATE.to_string()))
    }

    pub fn k(&self) -> usize {
        self.grades.len()
    }

    pub fn grades(&self) -> &[Grade] {
        &self.grades
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn grade_name(&self, index: usize) -> Result<&str> {
        self.grades
            .get(index)
            .map(|g| g.name.as_str())
            .ok_or_else(|| GazeError::invalid(format!("grade index {index} out of range 0..{}", self.k())))
    }

    pub fn assign_grade(&self, diff: f64) -> Result<usize> {
        if !(diff >= 0.0) {
            return Err(GazeError::invalid(format!(
                "gaze difference must be non-negative, got {diff}"
            )));
        }
        Ok(self
            .grades
            .iter()
            .position(|g| diff >= g.lo && diff < g.hi)
            .unwrap_or(self.grades.len() - 1))
    }

    pub fn render_prompt(&self, index: usize) -> Result<String> {
        Ok(self.template.replace(GRADE_PLACEHOLDER, self.grade_name(index)?))
    }

    /// All `K` prompts in grade order.
    pub fn prompts(&self) -> Vec<String> {
        self.grades
            .iter()
            .map(|g| self.template.replace(GRADE_PLACEHOLDER, &g.name))
            .collect()
    }
}

pub fn assign_grade(diff: f64, scheme: &GradeScheme) -> Result<usize> {
    scheme.assign_grade(diff)
}

pub fn render_prompt(index: usize, scheme: &GradeScheme) -> Result<String> {
    scheme.render_prompt(index)
}
