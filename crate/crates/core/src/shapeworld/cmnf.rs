//! Binary container for externally extracted region features.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CMNF"
//! repeated until EOF:
//!   region_id: u64
//!   box:       4 x f64   (x_min, y_min, x_max, y_max) in pixels
//!   len:       u64
//!   features:  len x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::features::{spatial_feature, RegionFeatures};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMNF";

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub region_id: u64,
    pub bbox: [f64; 4],
    pub features: Vec<f64>,
}

impl RegionRecord {
    /// Region features for an image of the given size.
    pub fn to_region_features(&self, width: f64, height: f64) -> RegionFeatures {
        RegionFeatures {
            x_v: self.features.clone(),
            x_s: spatial_feature(self.bbox, width, height),
        }
    }
}

pub fn write_region_file(path: impl AsRef<Path>, records: &[RegionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    w.write_all(MAGIC)?;
    for r in records {
        w.write_all(&r.region_id.to_le_bytes())?;
        for v in r.bbox {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(r.features.len() as u64).to_le_bytes())?;
        for v in &r.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_region_file(path: impl AsRef<Path>) -> Result<Vec<RegionRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(Error::file(path))?).read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Vec<RegionRecord>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CMNF magic".into()));
    }
    let mut pos = 4;
    let take8 = |pos: &mut usize| -> Result<[u8; 8]> {
        let end = *pos + 8;
        let chunk = bytes
            .get(*pos..end)
            .ok_or_else(|| Error::Format(format!("truncated region record at byte {}", *pos)))?;
        *pos = end;
        Ok(chunk.try_into().expect("8 bytes"))
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let region_id = u64::from_le_bytes(take8(&mut pos)?);
        let mut bbox = [0.0; 4];
        for b in &mut bbox {
            *b = f64::from_le_bytes(take8(&mut pos)?);
        }
        let len = u64::from_le_bytes(take8(&mut pos)?) as usize;
        if len > (bytes.len() - pos) / 8 {
            return Err(Error::Format(format!("region {region_id} claims {len} features past end of file")));
        }
        let features = (0..len)
            .map(|_| take8(&mut pos).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        out.push(RegionRecord {
            region_id,
            bbox,
            features,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_spatial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.cmnf");
        let recs = vec![
            RegionRecord {
                region_id: 7,
                bbox: [0.0, 0.0, 320.0, 240.0],
                features: vec![0.5, -1.25, 3.0],
            },
            RegionRecord {
                region_id: 9,
                bbox: [10.0, 20.0, 30.0, 60.0],
                features: vec![],
            },
        ];
        write_region_file(&p, &recs).unwrap();
        assert_eq!(read_region_file(&p).unwrap(), recs);
        let f = recs[0].to_region_features(640.0, 480.0);
        assert_eq!(f.x_s, [0.0, 0.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(parse(b"CMNX"), Err(Error::Format(_))));
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&1u64.to_le_bytes());
        b.extend_from_slice(&[0u8; 12]);
        assert!(matches!(parse(&b), Err(Error::Format(_))));
    }
}
