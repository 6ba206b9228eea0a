//! Plain-text table schema.
//!
//! One column per line, `#` starts a comment:
//!
//! ```text
//! age      = numeric
//! colour   = categorical : red, green, blue
//! y1       = target_numeric
//! label    = target_class : cat, dog
//! photo    = image_path
//! ```

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical(Vec<String>),
    TargetNumeric,
    TargetClass(Vec<String>),
    ImagePath,
}

impl ColumnKind {
    pub fn is_input(&self) -> bool {
        matches!(self, ColumnKind::Numeric | ColumnKind::Categorical(_))
    }

    pub fn is_target(&self) -> bool {
        matches!(self, ColumnKind::TargetNumeric | ColumnKind::TargetClass(_))
    }

    fn keyword(&self) -> &'static str {
        match self {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Categorical(_) => "categorical",
            ColumnKind::TargetNumeric => "target_numeric",
            ColumnKind::TargetClass(_) => "target_class",
            ColumnKind::ImagePath => "image_path",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub columns: Vec<Column>,
}

fn parse_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Data(format!("schema line {line}: {msg}"))
}

fn parse_categories(line: usize, list: Option<&str>, kind: &str) -> Result<Vec<String>> {
    let list = list.ok_or_else(|| parse_err(line, format!("{kind} needs a category list after ':'")))?;
    let cats: Vec<String> = list.split(',').map(|c| c.trim().to_string()).collect();
    if cats.iter().any(String::is_empty) {
        return Err(parse_err(line, "empty category name"));
    }
    let mut sorted = cats.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(parse_err(line, format!("duplicate category `{}`", w[0])));
    }
    Ok(cats)
}

impl TableSchema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns: Vec<Column> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (name, rest) = body
                .split_once('=')
                .ok_or_else(|| parse_err(line, "expected `<name> = <kind>`"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(parse_err(line, "empty column name"));
            }
            if columns.iter().any(|c| c.name == name) {
                return Err(parse_err(line, format!("duplicate column `{name}`")));
            }
            let (kind, list) = match rest.split_once(':') {
                Some((k, l)) => (k.trim(), Some(l)),
                None => (rest.trim(), None),
            };
            let kind = match kind {
                "numeric" | "target_numeric" | "image_path" if list.is_some() => {
                    return Err(parse_err(line, format!("{kind} takes no category list")))
                }
                "numeric" => ColumnKind::Numeric,
                "target_numeric" => ColumnKind::TargetNumeric,
                "image_path" => ColumnKind::ImagePath,
                "categorical" => ColumnKind::Categorical(parse_categories(line, list, kind)?),
                "target_class" => ColumnKind::TargetClass(parse_categories(line, list, kind)?),
                other => return Err(parse_err(line, format!("unknown column kind `{other}`"))),
            };
            columns.push(Column {
                name: name.to_string(),
                kind,
            });
        }
        let schema = TableSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let count = |f: fn(&ColumnKind) -> bool| self.columns.iter().filter(|c| f(&c.kind)).count();
        if count(ColumnKind::is_input) == 0 {
            return Err(Error::Data("schema has no input feature".into()));
        }
        let numeric_targets = count(|k| matches!(k, ColumnKind::TargetNumeric));
        let class_targets = count(|k| matches!(k, ColumnKind::TargetClass(_)));
        match (numeric_targets, class_targets) {
            (n, 0) if n > 0 => {}
            (0, 1) => {}
            _ => {
                return Err(Error::Data(format!(
                    "schema needs exactly one target group (some target_numeric columns or one \
                     target_class column), got {numeric_targets} numeric and {class_targets} class"
                )))
            }
        }
        if count(|k| matches!(k, ColumnKind::ImagePath)) > 1 {
            return Err(Error::Data("schema has more than one image_path column".into()));
        }
        Ok(())
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind.is_input())
    }

    pub fn targets(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind.is_target())
    }

    pub fn image_column(&self) -> Option<&Column> {
        self.columns.iter().find(|c| c.kind == ColumnKind::ImagePath)
    }

    /// Downstream task implied by the target columns.
    pub fn task(&self) -> crate::encoders::Task {
        match self.class_names() {
            Some(names) => crate::encoders::Task::Classification { classes: names.len() },
            None => crate::encoders::Task::Regression {
                dim: self.targets().count(),
            },
        }
    }

    pub fn input_len(&self) -> usize {
        self.inputs().count()
    }

    /// Class names when the target is categorical.
    pub fn class_names(&self) -> Option<&[String]> {
        self.columns.iter().find_map(|c| match &c.kind {
            ColumnKind::TargetClass(names) => Some(names.as_slice()),
            _ => None,
        })
    }
}

impl fmt::Display for TableSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.columns {
            write!(f, "{} = {}", c.name, c.kind.keyword())?;
            if let ColumnKind::Categorical(cats) | ColumnKind::TargetClass(cats) = &c.kind {
                write!(f, " : {}", cats.join(", "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
