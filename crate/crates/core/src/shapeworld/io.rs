//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"version":"shapeworld-v1","n_scenes":N}`; every
//! following line is one scene:
//!
//! ```text
//! {"scene_id":"scene-000000","grid_size":5,
//!  "objects":[{"row":0,"col":1,"shape":"circle","color":"red","size":"small"}, ...],
//!  "expressions":[{"tokens":["the","square",...],"subject_cell":[2,3],"object_cell":[2,0],
//!                  "template_parts":{"subj":"the square","rel":"right of","obj":"a red circle"}}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedScene, Dataset};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "shapeworld-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    n_scenes: usize,
}

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION.into(),
        n_scenes: data.scenes.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &data.scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut lines = BufReader::new(r).lines();
    let header: Header = match lines.next() {
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?,
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported version {:?}, expected {FORMAT_VERSION:?}", header.version),
        });
    }
    let mut scenes = Vec::with_capacity(header.n_scenes);
    let mut last = 1;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        last = lineno;
        let scene: AnnotatedScene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        scene.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    if scenes.len() != header.n_scenes {
        return Err(Error::Parse {
            line: last + 1,
            msg: format!("header promises {} scenes, found {}", header.n_scenes, scenes.len()),
        });
    }
    Ok(Dataset { scenes })
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(Error::file(path))?;
    write_dataset(BufWriter::new(f), data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(Error::file(path))?;
    read_dataset(f)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Splits scenes into `(train, test)` by a stable hash of the scene id.
pub fn split_by_hash(data: &Dataset, test_fraction: f64) -> (Dataset, Dataset) {
    let cut = (test_fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
    let (test, train): (Vec<_>, Vec<_>) = data
        .scenes
        .iter()
        .cloned()
        .partition(|s| fnv1a(&s.scene.scene_id) % 10_000 < cut);
    (Dataset { scenes: train }, Dataset { scenes: test })
}
