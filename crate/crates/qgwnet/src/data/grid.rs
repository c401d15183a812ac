//! Grid movies: city-scale traffic rasters with a text sidecar.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A stack of `frames` rasters of `height x width` pixels with `channels`
/// unsigned 8-bit values per pixel. A value of 0 means "no measurement".
///
/// On disk this is a text sidecar (`QGW-GRID v1`) describing the geometry
/// plus a raw binary file of the frames at `<sidecar>.bin`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMovie {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub m_per_px: f64,
    data: Vec<u8>,
}

impl GridMovie {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        frames: usize,
        m_per_px: f64,
        data: Vec<u8>,
    ) -> Result<Self> {
        let expect = height * width * channels * frames;
        if data.len() != expect {
            return Err(Error::invalid(
                "GridMovie",
                format!("expected {} bytes for the frame stack, got {}", expect, data.len()),
            ));
        }
        if m_per_px <= 0.0 {
            return Err(Error::invalid("GridMovie", "m_per_px must be positive"));
        }
        Ok(GridMovie {
            height,
            width,
            channels,
            frames,
            m_per_px,
            data,
        })
    }

    #[inline]
    pub fn index(&self, frame: usize, y: usize, x: usize, channel: usize) -> usize {
        ((frame * self.height + y) * self.width + x) * self.channels + channel
    }

    pub fn value(&self, frame: usize, y: usize, x: usize, channel: usize) -> u8 {
        self.data[self.index(frame, y, x, channel)]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_path(sidecar: &Path) -> PathBuf {
        let mut p = sidecar.as_os_str().to_owned();
        p.push(".bin");
        PathBuf::from(p)
    }

    pub fn save(&self, sidecar: &Path) -> Result<()> {
        let text = format!(
            "QGW-GRID v1\nH {}\nW {}\nCpx {}\nframes {}\nm_per_px {}\n",
            self.height, self.width, self.channels, self.frames, self.m_per_px
        );
        std::fs::write(sidecar, text)
            .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        let data_path = Self::data_path(sidecar);
        std::fs::write(&data_path, &self.data)
            .map_err(|e| Error::io(data_path.display().to_string(), e))
    }

    pub fn load(sidecar: &Path) -> Result<Self> {
        let p = sidecar.display().to_string();
        let text =
            std::fs::read_to_string(sidecar).map_err(|e| Error::io(p.clone(), e))?;
        let mut offset = 0u64;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "QGW-GRID v1" {
            return Err(Error::format(&p, "expected header 'QGW-GRID v1'", 0));
        }
        offset += header.len() as u64 + 1;
        let mut field = |key: &str| -> Result<f64> {
            let line = lines.next().unwrap_or("");
            let v = line
                .strip_prefix(&format!("{key} "))
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(&p, format!("expected '{key} <value>'"), offset))?;
            offset += line.len() as u64 + 1;
            Ok(v)
        };
        let h = field("H")? as usize;
        let w = field("W")? as usize;
        let c = field("Cpx")? as usize;
        let frames = field("frames")? as usize;
        let m_per_px = field("m_per_px")?;

        let data_path = Self::data_path(sidecar);
        let dp = data_path.display().to_string();
        let mut data = Vec::new();
        std::fs::File::open(&data_path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|e| Error::io(dp.clone(), e))?;
        let expect = h * w * c * frames;
        if data.len() != expect {
            return Err(Error::format(
                &dp,
                format!("expected {} bytes of frames, got {}", expect, data.len()),
                data.len() as u64,
            ));
        }
        GridMovie::new(h, w, c, frames, m_per_px, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let m = GridMovie::new(4, 5, 2, 3, 100.0, (0..120).map(|i| (i % 251) as u8).collect())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sidecar = dir.path().join("movie.qgwgrid");
        m.save(&sidecar).unwrap();
        let m2 = GridMovie::load(&sidecar).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(GridMovie::new(2, 2, 1, 1, 100.0, vec![0; 3]).is_err());
    }
}
