//! Text numerics for persisted records: every float is written with 17
//! significant decimal digits, which reloads to the identical bit pattern.

use serde::de::Deserializer;
use serde::ser::{Error as _, SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

pub fn format_f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw(x: f64) -> Result<Box<RawValue>, String> {
    if !x.is_finite() {
        return Err(format!("cannot persist non-finite value {x}"));
    }
    RawValue::from_string(format_f17(x)).map_err(|e| e.to_string())
}

pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*x).map_err(S::Error::custom)?.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    f64::deserialize(d)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&raw(x).map_err(S::Error::custom)?)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

pub mod opt_vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match xs {
            Some(v) => super::vec::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Option::<Vec<f64>>::deserialize(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Serialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Rec {
        #[serde(with = "crate::numfmt")]
        x: f64,
        #[serde(with = "crate::numfmt::vec")]
        xs: Vec<f64>,
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_f17(0.1), "1.0000000000000001e-1");
        let s = serde_json::to_string(&Rec { x: 1.5, xs: vec![-2.0] }).unwrap();
        assert_eq!(s, r#"{"x":1.5000000000000000e0,"xs":[-2.0000000000000000e0]}"#);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(serde_json::to_string(&Rec { x: f64::NAN, xs: vec![] }).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let rec = Rec { x, xs: vec![x, -x] };
            let back: Rec = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
            prop_assert_eq!(back.x.to_bits(), x.to_bits());
            prop_assert_eq!(back.xs[1].to_bits(), (-x).to_bits());
        }
    }
}
