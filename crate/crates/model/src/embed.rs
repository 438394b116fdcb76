//! Compound-token and expressive-parameter embeddings.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, Scope};

/// Four lookup tables whose rows are summed per step. Row 0 of each table
/// is the learned IGNORE embedding.
pub struct CompoundEmbedding {
    pub tables: Vec<Tensor>,
    pub sizes: [usize; 4],
    pub d: usize,
}

impl CompoundEmbedding {
    pub fn new(s: &mut Scope, name: &str, sizes: [usize; 4], d: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        let tables = sizes
            .iter()
            .enumerate()
            .map(|(j, &n)| s.create(&format!("table{j}"), &[n, d], Init::Normal(std)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tables, sizes, d })
    }

    /// Checks that every id of a flat `n * 4` buffer fits its vocabulary.
    pub fn check(&self, ids: &[u32]) -> Result<()> {
        for row in ids.chunks(4) {
            for (column, (&id, &size)) in row.iter().zip(&self.sizes).enumerate() {
                if id as usize >= size {
                    return Err(Error::IdOutOfVocabulary { column, id, size });
                }
            }
        }
        Ok(())
    }

    /// Rows of table `column` for a 1-D u32 id tensor.
    pub fn lookup(&self, column: usize, ids: &Tensor) -> Result<Tensor> {
        Ok(self.tables[column].index_select(ids, 0)?)
    }

    /// Sums the four sub-token embeddings of a flat `(b * t * 4)` id
    /// buffer into a `(b, t, d)` tensor.
    pub fn forward(&self, ids: &[u32], b: usize, t: usize, device: &Device) -> Result<Tensor> {
        if ids.len() != b * t * 4 {
            return Err(Error::Shape(format!("{} ids for {b}x{t} steps", ids.len())));
        }
        self.check(ids)?;
        let mut sum: Option<Tensor> = None;
        for j in 0..4 {
            let column: Vec<u32> = ids.iter().skip(j).step_by(4).copied().collect();
            let rows = self.lookup(j, &Tensor::from_vec(column, b * t, device)?)?;
            sum = Some(match sum {
                Some(acc) => (acc + rows)?,
                None => rows,
            });
        }
        Ok(sum.expect("four columns").reshape((b, t, self.d))?)
    }
}

/// Per-step scaling of `[beat_period, velocity, timing, articulation]`
/// that brings velocity to the range of the other parameters.
pub const PV_SCALE: [f64; 4] = [1.0, 1.0 / 127.0, 1.0, 1.0];

/// Learned linear map of the four real-valued parameters, equivalent to
/// one affine map per parameter summed across parameters.
pub struct PvEmbedding {
    pub linear: Linear,
}

impl PvEmbedding {
    pub fn new(s: &mut Scope, name: &str, d: usize, std: f64) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(s, name, 4, d, std)?,
        })
    }

    /// `pv` is a flat `(b * t * 4)` buffer.
    pub fn forward(&self, pv: &[f32], b: usize, t: usize, device: &Device) -> Result<Tensor> {
        if pv.len() != b * t * 4 {
            return Err(Error::Shape(format!("{} pv values for {b}x{t} steps", pv.len())));
        }
        if let Some(i) = pv.iter().position(|x| !x.is_finite()) {
            return Err(Error::Config(format!("non-finite expressive parameter at step {}", i / 4)));
        }
        let scaled: Vec<f64> = pv
            .iter()
            .enumerate()
            .map(|(i, &x)| x as f64 * PV_SCALE[i % 4])
            .collect();
        let dtype = self.linear.weight.dtype();
        let x = Tensor::from_vec(scaled, (b, t, 4), device)?.to_dtype(dtype)?;
        self.linear.forward(&x)
    }
}
