//! Dataset file format.
//!
//! Little-endian layout:
//!
//! ```text
//! "AVXD"  u32 version = 1  u32 n_clips
//! per clip: u32 id, u32 fps_v, u32 T_v, u32 D_v, u32 fps_a, u32 T_a, u32 D_a,
//!           f32 video[T_v×D_v], f32 audio[T_a×D_a], f32 labels[T_v×2]
//! ```

use std::fs;
use std::path::Path;

use super::{ClipRecord, DataError, Dataset};
use crate::autodiff::Tensor;
use crate::binio::{put_f32s, put_u32, ByteReader};

const MAGIC: &[u8; 4] = b"AVXD";
const VERSION: u32 = 1;

pub fn write_dataset(dataset: &Dataset) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION)?;
    put_u32(&mut out, dataset.clips.len() as u32)?;
    for clip in &dataset.clips {
        clip.validate()?;
        for v in [
            clip.id,
            clip.fps_v,
            clip.video.rows() as u32,
            clip.video.cols() as u32,
            clip.fps_a,
            clip.audio.rows() as u32,
            clip.audio.cols() as u32,
        ] {
            put_u32(&mut out, v)?;
        }
        put_f32s(&mut out, clip.video.data())?;
        put_f32s(&mut out, clip.audio.data())?;
        put_f32s(&mut out, clip.labels.data())?;
    }
    Ok(out)
}

fn matrix(r: &mut ByteReader<'_>, rows: usize, cols: usize, clip_id: u32) -> Result<Tensor, DataError> {
    let n = rows.checked_mul(cols).ok_or(DataError::Truncated)?;
    let data = r.f32s(n).ok_or(DataError::Truncated)?;
    Tensor::matrix(rows, cols, data).map_err(|e| DataError::InvalidClip {
        clip_id,
        reason: e.to_string(),
    })
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    use DataError::Truncated;
    let mut r = ByteReader::new(bytes);
    if r.take(4).ok_or(Truncated)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32().ok_or(Truncated)?;
    if version != VERSION {
        return Err(DataError::VersionMismatch(version));
    }
    let n = r.u32().ok_or(Truncated)?;
    let mut clips = Vec::new();
    for _ in 0..n {
        let mut h = [0u32; 7];
        for v in h.iter_mut() {
            *v = r.u32().ok_or(Truncated)?;
        }
        let [id, fps_v, t_v, d_v, fps_a, t_a, d_a] = h;
        let video = matrix(&mut r, t_v as usize, d_v as usize, id)?;
        let audio = matrix(&mut r, t_a as usize, d_a as usize, id)?;
        let labels = matrix(&mut r, t_v as usize, 2, id)?;
        let clip = ClipRecord {
            id,
            fps_v,
            fps_a,
            audio,
            video,
            labels,
        };
        clip.validate()?;
        clips.push(clip);
    }
    if r.remaining() != 0 {
        return Err(DataError::TrailingBytes(r.remaining()));
    }
    Ok(Dataset { clips })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, write_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_dataset(&fs::read(path)?)
}
