//! Missing-value-aware sensor time series and the `QGW-SERIES` file format.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};

use crate::error::{Error, Result};

/// `N` locations x `T` steps x `C` channels of measurements with a presence
/// mask. Entries with mask 0 carry value 0 in storage; values are kept as
/// `f32` to match the on-disk payload exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    num_nodes: usize,
    num_steps: usize,
    channels: usize,
    interval_min: u32,
    start: DateTime<Utc>,
    values: Vec<f32>,
    mask: Vec<u8>,
}

impl TrafficSeries {
    pub fn new(
        num_nodes: usize,
        num_steps: usize,
        channels: usize,
        interval_min: u32,
        start: DateTime<Utc>,
        mut values: Vec<f32>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("TrafficSeries", "empty series"));
        }
        let len = num_nodes * num_steps * channels;
        if values.len() != len || mask.len() != len {
            return Err(Error::invalid(
                "TrafficSeries",
                format!(
                    "expected {} entries for T={} N={} C={}, got {} values / {} mask",
                    len,
                    num_steps,
                    num_nodes,
                    channels,
                    values.len(),
                    mask.len()
                ),
            ));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::invalid("TrafficSeries", "mask entries must be 0 or 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("TrafficSeries", "values must be finite"));
        }
        // Enforce the storage invariant: masked-out entries hold 0.
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m == 0 {
                *v = 0.0;
            }
        }
        Ok(TrafficSeries {
            num_nodes,
            num_steps,
            channels,
            interval_min,
            start,
            values,
            mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn interval_min(&self) -> u32 {
        self.interval_min
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    #[inline]
    pub fn index(&self, step: usize, node: usize, channel: usize) -> usize {
        (step * self.num_nodes + node) * self.channels + channel
    }

    pub fn value(&self, step: usize, node: usize, channel: usize) -> f32 {
        self.values[self.index(step, node, channel)]
    }

    pub fn is_present(&self, step: usize, node: usize, channel: usize) -> bool {
        self.mask[self.index(step, node, channel)] == 1
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    /// Fraction of entries with no measurement.
    pub fn missing_fraction(&self) -> f64 {
        let present: usize = self.mask.iter().map(|&m| m as usize).sum();
        1.0 - present as f64 / self.mask.len() as f64
    }

    /// Writes the `QGW-SERIES v1` format: a text header, then little-endian
    /// `f32` values, then the presence mask packed to bits (row-major,
    /// padded to a whole byte). Lossless round trip with [`Self::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(p.clone(), e))?;
        let header = format!(
            "QGW-SERIES v1\nN {}\nT {}\nC {}\ninterval_min {}\nstart {}\n",
            self.num_nodes,
            self.num_steps,
            self.channels,
            self.interval_min,
            self.start.to_rfc3339(),
        );
        file.write_all(header.as_bytes())
            .map_err(|e| Error::io(p.clone(), e))?;
        let mut payload = Vec::with_capacity(self.values.len() * 4 + self.mask.len() / 8 + 1);
        for v in &self.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&pack_bits(&self.mask));
        file.write_all(&payload).map_err(|e| Error::io(p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(p.clone(), e))?;

        fn next_line<'a>(
            bytes: &'a [u8],
            offset: &mut usize,
            path: &str,
            expect: &str,
        ) -> Result<(&'a str, usize)> {
            let at = *offset;
            let rest = &bytes[at..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(path, format!("missing line '{expect}'"), at as u64))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::format(path, "header is not UTF-8", at as u64))?;
            *offset = at + nl + 1;
            Ok((line, at))
        }
        fn header_field(
            bytes: &[u8],
            offset: &mut usize,
            path: &str,
            key: &str,
        ) -> Result<(String, usize)> {
            let (line, at) = next_line(bytes, offset, path, key)?;
            let v = line
                .strip_prefix(&format!("{key} "))
                .ok_or_else(|| Error::format(path, format!("expected '{key} <value>'"), at as u64))?;
            Ok((v.to_string(), at))
        }

        let mut offset = 0usize;
        let (header, _) = next_line(&bytes, &mut offset, &p, "QGW-SERIES v1")?;
        if header != "QGW-SERIES v1" {
            return Err(Error::format(&p, "expected header 'QGW-SERIES v1'", 0));
        }
        let (ns, at) = header_field(&bytes, &mut offset, &p, "N")?;
        let n: usize = ns.parse().map_err(|_| Error::format(&p, "bad N", at as u64))?;
        let (ts, at) = header_field(&bytes, &mut offset, &p, "T")?;
        let t: usize = ts.parse().map_err(|_| Error::format(&p, "bad T", at as u64))?;
        let (cs, at) = header_field(&bytes, &mut offset, &p, "C")?;
        let c: usize = cs.parse().map_err(|_| Error::format(&p, "bad C", at as u64))?;
        let (is, at) = header_field(&bytes, &mut offset, &p, "interval_min")?;
        let interval: u32 = is
            .parse()
            .map_err(|_| Error::format(&p, "bad interval_min", at as u64))?;
        let (start_s, at) = header_field(&bytes, &mut offset, &p, "start")?;
        let start = DateTime::parse_from_rfc3339(&start_s)
            .map_err(|_| Error::format(&p, "bad ISO-8601 start timestamp", at as u64))?
            .with_timezone(&Utc);

        if t == 0 {
            return Err(Error::format(&p, "empty series", at as u64));
        }
        let len = n * t * c;
        let need_values = len * 4;
        let need_mask = len.div_ceil(8);
        if bytes.len() < offset + need_values + need_mask {
            return Err(Error::format(
                &p,
                format!(
                    "truncated payload: need {} bytes, file ends early",
                    offset + need_values + need_mask
                ),
                bytes.len() as u64,
            ));
        }
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let b = &bytes[offset + i * 4..offset + i * 4 + 4];
            values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        offset += need_values;
        let mask = unpack_bits(&bytes[offset..offset + need_mask], len);
        TrafficSeries::new(n, t, c, interval, start, values, mask)
    }

    /// Builds a series from CSV rows `timestamp,node_id,channel,value`.
    /// Timestamps must land on the interval grid; absent rows become
    /// missing entries. Duplicate coordinates are an error.
    pub fn from_csv(path: &Path, interval_min: u32) -> Result<Self> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
        let mut rows: Vec<(DateTime<Utc>, usize, usize, f32)> = Vec::new();
        let mut offset = 0u64;
        for (i, line) in text.lines().enumerate() {
            let at = offset;
            offset += line.len() as u64 + 1;
            if i == 0 {
                if line.trim() != "timestamp,node_id,channel,value" {
                    return Err(Error::format(
                        &p,
                        "expected header 'timestamp,node_id,channel,value'",
                        at,
                    ));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(&p, format!("expected 4 fields, got {}", fields.len()), at));
            }
            let ts = DateTime::parse_from_rfc3339(fields[0].trim())
                .map_err(|_| Error::format(&p, "bad timestamp", at))?
                .with_timezone(&Utc);
            let node: usize = fields[1]
                .trim()
                .parse()
                .map_err(|_| Error::format(&p, "bad node_id", at))?;
            let channel: usize = fields[2]
                .trim()
                .parse()
                .map_err(|_| Error::format(&p, "bad channel", at))?;
            let value: f32 = fields[3]
                .trim()
                .parse()
                .map_err(|_| Error::format(&p, "bad value", at))?;
            rows.push((ts, node, channel, value));
        }
        if rows.is_empty() {
            return Err(Error::invalid("TrafficSeries::from_csv", "empty series"));
        }
        let start = rows.iter().map(|r| r.0).min().unwrap();
        let end = rows.iter().map(|r| r.0).max().unwrap();
        let step_secs = interval_min as i64 * 60;
        let span = (end - start).num_seconds();
        if span % step_secs != 0 {
            return Err(Error::invalid(
                "TrafficSeries::from_csv",
                "timestamps do not align to the interval grid",
            ));
        }
        let t_len = (span / step_secs) as usize + 1;
        let n = rows.iter().map(|r| r.1).max().unwrap() + 1;
        let c = rows.iter().map(|r| r.2).max().unwrap() + 1;
        let len = t_len * n * c;
        let mut values = vec![0.0f32; len];
        let mut mask = vec![0u8; len];
        for (ts, node, channel, value) in rows {
            let off = (ts - start).num_seconds();
            if off % step_secs != 0 {
                return Err(Error::invalid(
                    "TrafficSeries::from_csv",
                    format!("timestamp {ts} off the interval grid"),
                ));
            }
            let t = (off / step_secs) as usize;
            let idx = (t * n + node) * c + channel;
            if mask[idx] == 1 {
                return Err(Error::invalid(
                    "TrafficSeries::from_csv",
                    format!("duplicate row for t={t} node={node} channel={channel}"),
                ));
            }
            values[idx] = value;
            mask[idx] = 1;
        }
        TrafficSeries::new(n, t_len, c, interval_min, start, values, mask)
    }
}

fn pack_bits(mask: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| (packed[i / 8] >> (i % 8)) & 1)
        .collect()
}
