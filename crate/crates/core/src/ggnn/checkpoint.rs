//! Versioned JSON form of a trained model together with its codec.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::codec::GridCodec;
use super::gru::GruModel;
use super::GgnnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub candidate_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub codec: GridCodec,
    /// Keyed by parameter name; bias vectors are stored as `rows × 1`.
    pub matrices: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(model: &GruModel, codec: &GridCodec) -> Self {
        let mut matrices = BTreeMap::new();
        let mut put = |name: &str, rows: usize, cols: usize, data: &[f64]| {
            matrices.insert(name.to_string(), Matrix { rows, cols, data: data.to_vec() });
        };
        let shape2 = |m: &Array2<f64>| (m.nrows(), m.ncols());
        for (name, values) in model.parameters() {
            let (rows, cols) = match name {
                "w_rx" => shape2(&model.w_rx),
                "w_rh" => shape2(&model.w_rh),
                "w_zx" => shape2(&model.w_zx),
                "w_zh" => shape2(&model.w_zh),
                "w_hx" => shape2(&model.w_hx),
                "w_hh" => shape2(&model.w_hh),
                "w_o" => shape2(&model.w_o),
                _ => (values.len(), 1),
            };
            put(name, rows, cols, values);
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: Dims { input: model.input_dim(), hidden: model.hidden_dim(), candidate_bias: model.b_h.is_some() },
            codec: codec.clone(),
            matrices,
        }
    }

    /// Rebuilds the model, checking version, every shape and finiteness.
    pub fn into_model(self) -> Result<(GruModel, GridCodec), GgnnError> {
        let err = |m: String| GgnnError::Checkpoint(m);
        if self.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", self.version)));
        }
        let Dims { input: dx, hidden: dh, candidate_bias } = self.dims;
        if dx != self.codec.dim() {
            return Err(err(format!("input dimension {dx} does not match codec grid of {} cells", self.codec.dim())));
        }
        let mut matrices = self.matrices;
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, GgnnError> {
            let m = matrices.remove(name).ok_or_else(|| err(format!("missing matrix {name}")))?;
            if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(err(format!(
                    "{name} is {}×{} with {} values, expected {rows}×{cols}",
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
            Ok(m.data)
        };
        let mat = |v: Vec<f64>, r: usize, c: usize| Array2::from_shape_vec((r, c), v).expect("length checked");
        let model = GruModel {
            w_rx: mat(take("w_rx", dh, dx)?, dh, dx),
            w_rh: mat(take("w_rh", dh, dh)?, dh, dh),
            b_r: Array1::from(take("b_r", dh, 1)?),
            w_zx: mat(take("w_zx", dh, dx)?, dh, dx),
            w_zh: mat(take("w_zh", dh, dh)?, dh, dh),
            b_z: Array1::from(take("b_z", dh, 1)?),
            w_hx: mat(take("w_hx", dh, dx)?, dh, dx),
            w_hh: mat(take("w_hh", dh, dh)?, dh, dh),
            b_h: if candidate_bias { Some(Array1::from(take("b_h", dh, 1)?)) } else { None },
            w_o: mat(take("w_o", dx, dh)?, dx, dh),
        };
        if let Some(extra) = matrices.keys().next() {
            return Err(err(format!("unexpected matrix {extra}")));
        }
        model.validate()?;
        Ok((model, self.codec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggnn::codec::CellAnchor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(bias: bool) -> (GruModel, GridCodec) {
        let codec = GridCodec::new([0.0, 1.0], [0.0, 1.0], 2, 3, 20.0, CellAnchor::CellCenter).unwrap();
        let model = GruModel::random(6, 4, 0.5, bias, &mut ChaCha8Rng::seed_from_u64(1));
        (model, codec)
    }

    #[test]
    fn round_trip_through_json() {
        for bias in [false, true] {
            let (model, codec) = fixture(bias);
            let text = serde_json::to_string(&Checkpoint::new(&model, &codec)).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            let (m2, c2) = back.into_model().unwrap();
            assert_eq!(m2, model);
            assert_eq!(c2, codec);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_versions() {
        let (model, codec) = fixture(false);
        let good = Checkpoint::new(&model, &codec);

        let mut v = good.clone();
        v.version = 99;
        assert!(v.into_model().is_err());

        let mut s = good.clone();
        s.matrices.get_mut("w_zh").unwrap().data.pop();
        assert!(matches!(s.into_model(), Err(GgnnError::Checkpoint(m)) if m.contains("w_zh")));

        let mut missing = good.clone();
        missing.matrices.remove("w_o");
        assert!(missing.into_model().is_err());

        let mut nan = good.clone();
        nan.matrices.get_mut("b_r").unwrap().data[0] = f64::NAN;
        assert!(nan.into_model().is_err());

        let mut dims = good;
        dims.dims.input = 5;
        assert!(dims.into_model().is_err());
    }
}
