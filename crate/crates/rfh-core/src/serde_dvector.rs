//! Serialize nalgebra vectors as plain JSON arrays.

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
    let data = Vec::<f64>::deserialize(d)?;
    Ok(DVector::from_vec(data))
}
