//! JSON encoding shared by every file format of the crate.
//!
//! Complex numbers are `[re, im]` pairs and matrices are arrays of rows. Decoding walks
//! a `serde_json::Value` while tracking the JSON pointer of the current node, so a
//! schema violation names the exact offending location.

use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grid::HarmonicGrid;
use crate::linalg::{CMatrix, C64};

pub fn complex(z: C64) -> Value {
    Value::from(vec![z.re, z.im])
}

pub fn cvec(v: &[C64]) -> Value {
    Value::Array(v.iter().map(|z| complex(*z)).collect())
}

pub fn cmatrix(m: &CMatrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| complex(m[(r, c)])).collect()))
            .collect(),
    )
}

pub fn rmatrix(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::from((0..m.ncols()).map(|c| m[(r, c)]).collect::<Vec<f64>>()))
            .collect(),
    )
}

pub fn grid(g: &HarmonicGrid) -> Value {
    object(vec![
        ("f0_hz", g.f0().into()),
        ("fm_hz", g.fm().into()),
        ("harmonics", Value::from(g.harmonics().to_vec())),
    ])
}

/// Pretty-printed, deterministic serialization (object keys sorted).
pub fn to_string(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

pub fn write_file(path: impl AsRef<Path>, v: &Value) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(v)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Value> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        Error::parse(
            "",
            format!("malformed JSON at line {} column {}: {e}", e.line(), e.column()),
        )
    })
}

pub fn object(entries: Vec<(&str, Value)>) -> Value {
    let mut m = Map::new();
    for (k, v) in entries {
        m.insert(k.to_string(), v);
    }
    Value::Object(m)
}

/// A JSON value together with its pointer.
#[derive(Clone)]
pub struct Node<'a> {
    value: &'a Value,
    pointer: String,
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

impl<'a> Node<'a> {
    pub fn root(value: &'a Value) -> Self {
        Self {
            value,
            pointer: String::new(),
        }
    }

    pub fn pointer(&self) -> &str {
        if self.pointer.is_empty() {
            "/"
        } else {
            &self.pointer
        }
    }

    pub fn value(&self) -> &'a Value {
        self.value
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.pointer(), message)
    }

    fn child(&self, token: &str, value: &'a Value) -> Node<'a> {
        Node {
            value,
            pointer: format!("{}/{}", self.pointer, escape(token)),
        }
    }

    fn as_object(&self) -> Result<&'a Map<String, Value>> {
        self.value.as_object().ok_or_else(|| self.error("expected an object"))
    }

    pub fn key(&self, key: &str) -> Result<Node<'a>> {
        let obj = self.as_object()?;
        match obj.get(key) {
            Some(v) => Ok(self.child(key, v)),
            None => Err(Error::parse(
                format!("{}/{}", self.pointer, escape(key)),
                "missing required field",
            )),
        }
    }

    /// Optional field; `null` counts as absent.
    pub fn opt(&self, key: &str) -> Result<Option<Node<'a>>> {
        let obj = self.as_object()?;
        Ok(obj.get(key).filter(|v| !v.is_null()).map(|v| self.child(key, v)))
    }

    /// Rejects keys outside `allowed`.
    pub fn only_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.as_object()?.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::parse(format!("{}/{}", self.pointer, escape(k)), "unknown field"));
            }
        }
        Ok(())
    }

    pub fn items(&self) -> Result<Vec<Node<'a>>> {
        let arr = self.value.as_array().ok_or_else(|| self.error("expected an array"))?;
        Ok(arr
            .iter()
            .enumerate()
            .map(|(i, v)| self.child(&i.to_string(), v))
            .collect())
    }

    pub fn f64(&self) -> Result<f64> {
        self.value
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error("expected a finite number"))
    }

    pub fn u64(&self) -> Result<u64> {
        self.value
            .as_u64()
            .ok_or_else(|| self.error("expected a non-negative integer"))
    }

    pub fn usize(&self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn i64(&self) -> Result<i64> {
        self.value.as_i64().ok_or_else(|| self.error("expected an integer"))
    }

    pub fn bool(&self) -> Result<bool> {
        self.value.as_bool().ok_or_else(|| self.error("expected a boolean"))
    }

    pub fn str(&self) -> Result<&'a str> {
        self.value.as_str().ok_or_else(|| self.error("expected a string"))
    }

    pub fn f64_vec(&self) -> Result<Vec<f64>> {
        self.items()?.iter().map(Node::f64).collect()
    }

    pub fn complex(&self) -> Result<C64> {
        let items = self.items()?;
        if items.len() != 2 {
            return Err(self.error("expected a [re, im] pair"));
        }
        Ok(C64::new(items[0].f64()?, items[1].f64()?))
    }

    pub fn cvec(&self) -> Result<Vec<C64>> {
        self.items()?.iter().map(Node::complex).collect()
    }

    /// Complex matrix of the given shape (rows of `[re, im]` pairs).
    pub fn cmatrix(&self, rows: usize, cols: usize) -> Result<CMatrix> {
        let r = self.items()?;
        if r.len() != rows {
            return Err(self.error(format!("expected {rows} rows, found {}", r.len())));
        }
        let mut m = CMatrix::zeros(rows, cols);
        for (i, row) in r.iter().enumerate() {
            let entries = row.items()?;
            if entries.len() != cols {
                return Err(row.error(format!("expected {cols} columns, found {}", entries.len())));
            }
            for (j, e) in entries.iter().enumerate() {
                m[(i, j)] = e.complex()?;
            }
        }
        Ok(m)
    }

    pub fn grid(&self) -> Result<HarmonicGrid> {
        self.only_keys(&["f0_hz", "fm_hz", "harmonics"])?;
        let hn = self.key("harmonics")?;
        let hs = hn
            .items()?
            .iter()
            .map(|h| {
                let v = h.i64()?;
                i32::try_from(v).map_err(|_| h.error("harmonic index out of range"))
            })
            .collect::<Result<Vec<_>>>()?;
        HarmonicGrid::new(self.key("f0_hz")?.f64()?, self.key("fm_hz")?.f64()?, hs).map_err(|e| hn.error(e.to_string()))
    }

    pub fn rmatrix(&self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let r = self.items()?;
        if r.len() != rows {
            return Err(self.error(format!("expected {rows} rows, found {}", r.len())));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for (i, row) in r.iter().enumerate() {
            let entries = row.items()?;
            if entries.len() != cols {
                return Err(row.error(format!("expected {cols} columns, found {}", entries.len())));
            }
            for (j, e) in entries.iter().enumerate() {
                m[(i, j)] = e.f64()?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointers_name_the_offending_node() {
        let v = parse_str(r#"{"a": {"b": [[1, 2], [3, "x"]]}}"#).unwrap();
        let root = Node::root(&v);
        let err = root.key("a").unwrap().key("b").unwrap().cvec().unwrap_err();
        match err {
            Error::Parse { pointer, .. } => assert_eq!(pointer, "/a/b/1/1"),
            e => panic!("{e}"),
        }
        match root.key("zz").err().unwrap() {
            Error::Parse { pointer, .. } => assert_eq!(pointer, "/zz"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncated_text_is_a_parse_error() {
        assert!(matches!(parse_str("{\"a\": [1, 2"), Err(Error::Parse { .. })));
    }

    #[test]
    fn doubles_survive_a_text_round_trip() {
        let z = C64::new(0.1 + 0.2, -1.0 / 3.0);
        let text = to_string(&complex(z));
        let v = parse_str(&text).unwrap();
        assert_eq!(Node::root(&v).complex().unwrap(), z);
    }
}
