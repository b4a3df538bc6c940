//! Dataset file: `DNLD1`, a little-endian `u64` header length, a JSON header
//! describing the samples, then the samples as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::fourier::{FourierManifoldSpec, ModeSet};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_f64s, read_header, write_f64s, write_header};
use crate::nn::Tensor;
use crate::oracle::GaussianDataSpec;

pub const DATASET_MAGIC: &[u8; 5] = b"DNLD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Fourier { spec: FourierManifoldSpec },
    Gaussian { spec: GaussianDataSpec },
    Mixture { centers: Vec<[f64; 2]>, weights: Vec<f64>, std: f64 },
    /// Samples produced by integrating a trained model.
    Generated { checkpoint: String, steps: usize, method: String, seed: u64 },
}

/// Summary of the off-support spectral energy of clean training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualFloor {
    pub mean: f64,
    pub median: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub source: DatasetSource,
    /// `[count, ...sample shape]`
    pub shape: Vec<usize>,
    pub mode_set: Option<ModeSet>,
    pub residual_floor: Option<ResidualFloor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    /// `[count, features]`
    pub samples: Tensor,
}

impl DatasetFile {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let expected: usize = self.header.shape.iter().product();
        if expected != self.samples.numel() {
            return Err(Error::shape(
                "dataset file",
                format!("header shape {:?} vs {} values", self.header.shape, self.samples.numel()),
            ));
        }
        write_header(w, DATASET_MAGIC, &self.header)?;
        write_f64s(w, self.samples.data())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let header: DatasetHeader = read_header(r, DATASET_MAGIC)?;
        let count = *header
            .shape
            .first()
            .ok_or_else(|| Error::Format("empty dataset shape".into()))?;
        let numel: usize = header.shape.iter().product();
        let data = read_f64s(r, numel)?;
        let samples = Tensor::new(vec![count, numel / count.max(1)], data)?;
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }

    pub fn mode_set(&self) -> Result<&ModeSet> {
        self.header
            .mode_set
            .as_ref()
            .ok_or_else(|| Error::Format("dataset header carries no mode set".into()))
    }
}
