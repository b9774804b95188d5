//! Flat binary persistence for batches of channel samples.
//!
//! Layout, all integers and doubles little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"NCALDSET"
//! 8       4     format version (u32, currently 1)
//! 12      4     flags (u32, bit 0 = received pilots present)
//! 16      8     M (u64)
//! 24      8     K (u64)
//! 32      8     L (u64)
//! 40      8     sample count (u64)
//! 48      ...   samples
//! ```
//!
//! Each sample is `H_UL.re, H_UL.im, H_DL.re, H_DL.im` (each `M x K`, row
//! major) followed, when the pilot flag is set, by `Y_p.re, Y_p.im` (each
//! `M x L`, row major). Path geometry is not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::channel::ChannelSample;
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;

pub const DATASET_MAGIC: &[u8; 8] = b"NCALDSET";
pub const DATASET_VERSION: u32 = 1;
const FLAG_PILOTS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub antennas: usize,
    pub users: usize,
    pub pilot_length: usize,
    pub samples: Vec<ChannelSample>,
}

impl Dataset {
    pub fn new(antennas: usize, users: usize, pilot_length: usize, samples: Vec<ChannelSample>) -> Self {
        Self {
            antennas,
            users,
            pilot_length,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_pilots(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.pilots_rx.is_some())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let pilots = self.has_pilots();
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(if pilots { FLAG_PILOTS } else { 0 }).to_le_bytes())?;
        for n in [self.antennas, self.users, self.pilot_length, self.samples.len()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for s in &self.samples {
            self.check_shape(s)?;
            write_matrix(&mut w, &s.h_ul)?;
            write_matrix(&mut w, &s.h_dl)?;
            if pilots {
                write_matrix(&mut w, s.pilots_rx.as_ref().expect("checked above"))?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let flags = read_u32(&mut r)?;
        let antennas = read_u64(&mut r)? as usize;
        let users = read_u64(&mut r)? as usize;
        let pilot_length = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let h_ul = read_matrix(&mut r, antennas, users)?;
            let h_dl = read_matrix(&mut r, antennas, users)?;
            let pilots_rx = if flags & FLAG_PILOTS != 0 {
                Some(read_matrix(&mut r, antennas, pilot_length)?)
            } else {
                None
            };
            samples.push(ChannelSample {
                h_ul,
                h_dl,
                paths: Vec::new(),
                pilots_rx,
            });
        }
        Ok(Self {
            antennas,
            users,
            pilot_length,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    fn check_shape(&self, s: &ChannelSample) -> Result<()> {
        let want = (self.antennas, self.users);
        for h in [&s.h_ul, &s.h_dl] {
            if h.dim() != want {
                return Err(Error::dims("Dataset::write", want, h.dim()));
            }
        }
        if let Some(y) = &s.pilots_rx {
            if y.dim() != (self.antennas, self.pilot_length) {
                return Err(Error::dims(
                    "Dataset::write",
                    (self.antennas, self.pilot_length),
                    y.dim(),
                ));
            }
        }
        Ok(())
    }
}

fn write_matrix(w: &mut impl Write, m: &ComplexMatrix) -> Result<()> {
    for part in [m.re(), m.im()] {
        for x in part.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<ComplexMatrix> {
    let mut part = || -> Result<Array2<f64>> {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    };
    let re = part()?;
    let im = part()?;
    ComplexMatrix::from_parts(re, im)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
