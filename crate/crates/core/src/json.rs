//! JSON helpers for tables and MDP documents.
//!
//! Every float is written with 17 significant digits (`{:.16e}`) so that a
//! write/read cycle reproduces the exact bit pattern.

use ndarray::{Array1, Array2, Array3};
use serde_json::{Number, Value};
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) fn format_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn num(x: f64) -> Result<Value> {
    if !x.is_finite() {
        return Err(Error::InvalidTable(format!(
            "non-finite value {x} cannot be serialized"
        )));
    }
    let n = Number::from_str(&format_f64(x)).map_err(|e| Error::InvalidTable(format!("cannot encode {x}: {e}")))?;
    Ok(Value::Number(n))
}

pub(crate) fn vec1(v: &Array1<f64>) -> Result<Value> {
    Ok(Value::Array(v.iter().map(|&x| num(x)).collect::<Result<_>>()?))
}

pub(crate) fn vec2(t: &Array2<f64>) -> Result<Value> {
    t.outer_iter()
        .map(|row| Ok(Value::Array(row.iter().map(|&x| num(x)).collect::<Result<_>>()?)))
        .collect::<Result<Vec<_>>>()
        .map(Value::Array)
}

pub(crate) fn vec3(t: &Array3<f64>) -> Result<Value> {
    t.outer_iter()
        .map(|m| vec2(&m.to_owned()))
        .collect::<Result<Vec<_>>>()
        .map(Value::Array)
}

pub(crate) fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::InvalidTable(format!("missing field `{key}`")))
}

pub(crate) fn get_usize(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::InvalidTable(format!("field `{key}` is not a non-negative integer")))
}

pub(crate) fn as_f64(v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::InvalidTable(format!("expected a number, got {v}")))
}

pub(crate) fn get_f64(v: &Value, key: &str) -> Result<f64> {
    as_f64(field(v, key)?)
}

pub(crate) fn parse_vec1(v: &Value, len: usize) -> Result<Array1<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidTable("expected an array".into()))?;
    if arr.len() != len {
        return Err(Error::InvalidTable(format!(
            "expected {len} entries, found {}",
            arr.len()
        )));
    }
    arr.iter().map(as_f64).collect::<Result<Vec<_>>>().map(Array1::from)
}

pub(crate) fn parse_vec2(v: &Value, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidTable("expected an array of rows".into()))?;
    if arr.len() != rows {
        return Err(Error::InvalidTable(format!(
            "expected {rows} rows, found {}",
            arr.len()
        )));
    }
    let mut out = Array2::zeros((rows, cols));
    for (i, row) in arr.iter().enumerate() {
        let row = parse_vec1(row, cols)?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

pub(crate) fn parse_vec3(v: &Value, d0: usize, d1: usize, d2: usize) -> Result<Array3<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidTable("expected a nested array".into()))?;
    if arr.len() != d0 {
        return Err(Error::InvalidTable(format!(
            "expected {d0} slices, found {}",
            arr.len()
        )));
    }
    let mut out = Array3::zeros((d0, d1, d2));
    for (i, m) in arr.iter().enumerate() {
        let m = parse_vec2(m, d1, d2)?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(&m);
    }
    Ok(out)
}

/// Writes a single `|S|×|A|` table under `kind`.
pub fn table_to_json(kind: &str, values: &Array2<f64>) -> Result<String> {
    let doc = serde_json::json!({
        "kind": kind,
        "num_states": values.nrows(),
        "num_actions": values.ncols(),
        "values": vec2(values)?,
    });
    Ok(serde_json::to_string(&doc)?)
}

/// Reads a table written by [`table_to_json`], checking the `kind` tag.
pub fn table_from_json(kind: &str, text: &str) -> Result<Array2<f64>> {
    let doc: Value = serde_json::from_str(text)?;
    let found = field(&doc, "kind")?.as_str().unwrap_or_default();
    if found != kind {
        return Err(Error::InvalidTable(format!("expected kind `{kind}`, found `{found}`")));
    }
    let ns = get_usize(&doc, "num_states")?;
    let na = get_usize(&doc, "num_actions")?;
    parse_vec2(field(&doc, "values")?, ns, na)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn table_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e12f64..1e12, 6)) {
            let t = Array2::from_shape_vec((2, 3), vals).unwrap();
            let text = table_to_json("q-table", &t).unwrap();
            let back = table_from_json("q-table", &text).unwrap();
            for (a, b) in t.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let t = Array2::zeros((1, 1));
        let text = table_to_json("policy", &t).unwrap();
        assert!(table_from_json("q-table", &text).is_err());
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_f64(0.1), "1.0000000000000001e-1");
        assert!(num(f64::NAN).is_err());
    }
}
