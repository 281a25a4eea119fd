//! Time-tag streams and their file formats.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! offset 0   "QTT1"
//! offset 4   version: u16 (= 1)
//! offset 6   segment: u8 (0 ground, 1 space)
//! offset 7   9 reserved bytes, zero
//! offset 16  records: time_ps u64, channel u8 (9 bytes each)
//! ```
//!
//! Channels encode `2 * basis + outcome`: basis 0 is the first analyzer
//! setting of that side, basis 1 the second; outcome 0 is `+`, 1 is `-`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTT1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 9;
pub const N_CHANNELS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Ground,
    Space,
}

impl Segment {
    fn code(self) -> u8 {
        match self {
            Segment::Ground => 0,
            Segment::Space => 1,
        }
    }
}

pub fn channel(basis: u8, outcome: u8) -> u8 {
    2 * basis + outcome
}

pub fn basis_of(channel: u8) -> u8 {
    channel >> 1
}

pub fn outcome_of(channel: u8) -> u8 {
    channel & 1
}

/// Sorted detection records, stored column-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeTagStream {
    pub segment: Segment,
    pub times_ps: Vec<u64>,
    pub channels: Vec<u8>,
}

impl TimeTagStream {
    pub fn new(segment: Segment) -> Self {
        TimeTagStream {
            segment,
            times_ps: Vec::new(),
            channels: Vec::new(),
        }
    }

    pub fn with_capacity(segment: Segment, n: usize) -> Self {
        TimeTagStream {
            segment,
            times_ps: Vec::with_capacity(n),
            channels: Vec::with_capacity(n),
        }
    }

    /// Builds a stream, sorting records by time (stable).
    pub fn from_records(segment: Segment, mut records: Vec<(u64, u8)>) -> Self {
        records.sort_by_key(|r| r.0);
        let (times_ps, channels) = records.into_iter().unzip();
        TimeTagStream {
            segment,
            times_ps,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.times_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ps.is_empty()
    }

    pub fn push(&mut self, time_ps: u64, channel: u8) {
        self.times_ps.push(time_ps);
        self.channels.push(channel);
    }

    pub fn span_ps(&self) -> Option<(u64, u64)> {
        Some((*self.times_ps.first()?, *self.times_ps.last()?))
    }

    pub fn channel_counts(&self) -> [u64; 4] {
        let mut c = [0u64; 4];
        for &ch in &self.channels {
            c[ch as usize & 3] += 1;
        }
        c
    }

    /// Index range of records with `lo_ps <= t < hi_ps`.
    pub fn range(&self, lo_ps: u64, hi_ps: u64) -> std::ops::Range<usize> {
        let a = self.times_ps.partition_point(|&t| t < lo_ps);
        let b = self.times_ps.partition_point(|&t| t < hi_ps);
        a..b.max(a)
    }

    /// Checks ordering and channel range; the error offset is the record index.
    pub fn validate(&self) -> Result<()> {
        if self.times_ps.len() != self.channels.len() {
            return Err(Error::Config("time and channel columns differ in length".into()));
        }
        for (i, &ch) in self.channels.iter().enumerate() {
            if ch >= N_CHANNELS {
                return Err(format_err(record_offset(i) + 8, format!("channel {ch} out of range")));
            }
        }
        if let Some(i) = self.times_ps.windows(2).position(|w| w[1] < w[0]) {
            return Err(format_err(record_offset(i + 1), "records not sorted by time".into()));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::with_capacity(1 << 20, w);
        let mut header = [0u8; HEADER_LEN];
        header[..4].copy_from_slice(MAGIC);
        header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[6] = self.segment.code();
        w.write_all(&header)?;
        let mut rec = [0u8; RECORD_LEN];
        for (&t, &ch) in self.times_ps.iter().zip(&self.channels) {
            rec[..8].copy_from_slice(&t.to_le_bytes());
            rec[8] = ch;
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.len());
        self.write_binary(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Parses the binary format. Rejects bad headers, truncated records,
    /// out-of-range channels and unsorted times, reporting the byte offset.
    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::with_capacity(1 << 20, r);
        let mut header = [0u8; HEADER_LEN];
        let got = read_full(&mut r, &mut header)?;
        if got < HEADER_LEN {
            return Err(format_err(got as u64, "truncated header".into()));
        }
        if &header[..4] != MAGIC {
            return Err(format_err(0, "bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let segment = match header[6] {
            0 => Segment::Ground,
            1 => Segment::Space,
            s => return Err(format_err(6, format!("unknown segment {s}"))),
        };
        let mut s = TimeTagStream::new(segment);
        let mut buf = vec![0u8; RECORD_LEN * 8192];
        let mut offset = HEADER_LEN as u64;
        let mut last = 0u64;
        loop {
            let n = read_full(&mut r, &mut buf)?;
            let whole = n / RECORD_LEN;
            for rec in buf[..whole * RECORD_LEN].chunks_exact(RECORD_LEN) {
                let t = u64::from_le_bytes(rec[..8].try_into().unwrap());
                let ch = rec[8];
                if ch >= N_CHANNELS {
                    return Err(format_err(offset + 8, format!("channel {ch} out of range")));
                }
                if t < last {
                    return Err(format_err(offset, "records not sorted by time".into()));
                }
                last = t;
                s.push(t, ch);
                offset += RECORD_LEN as u64;
            }
            if n % RECORD_LEN != 0 {
                return Err(format_err(offset, format!("truncated record ({} of {RECORD_LEN} bytes)", n % RECORD_LEN)));
            }
            if n < buf.len() {
                return Ok(s);
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_binary(bytes)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "time_ps,channel")?;
        for (&t, &ch) in self.times_ps.iter().zip(&self.channels) {
            writeln!(w, "{t},{ch}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(segment: Segment, r: R) -> Result<Self> {
        let mut s = TimeTagStream::new(segment);
        let mut offset = 0u64;
        let mut last = 0u64;
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let here = offset;
            offset += line.len() as u64 + 1;
            let l = line.trim();
            if i == 0 && l.starts_with("time_ps") || l.is_empty() {
                continue;
            }
            let parsed = l
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse::<u64>().ok()?, b.trim().parse::<u8>().ok()?)));
            let Some((t, ch)) = parsed else {
                return Err(format_err(here, format!("malformed line {:?}", l)));
            };
            if ch >= N_CHANNELS {
                return Err(format_err(here, format!("channel {ch} out of range")));
            }
            if t < last {
                return Err(format_err(here, "records not sorted by time".into()));
            }
            last = t;
            s.push(t, ch);
        }
        Ok(s)
    }

    /// Reads a `.csv` file as CSV and anything else as binary.
    pub fn read_path(path: &Path, segment_hint: Segment) -> Result<Self> {
        let f = File::open(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(segment_hint, f)
        } else {
            Self::read_binary(f)
        }
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            self.write_csv(f)
        } else {
            self.write_binary(f)
        }
    }
}

fn record_offset(i: usize) -> u64 {
    (HEADER_LEN + i * RECORD_LEN) as u64
}

fn format_err(offset: u64, reason: String) -> Error {
    Error::Format { offset, reason }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// One pulse of the faint-pulse source as seen by the transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub time_ps: u64,
    pub intensity_class: u8,
    pub bit: u8,
    pub basis: u8,
}

pub fn write_pulse_log_csv<W: Write>(pulses: &[PulseRecord], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "time_ps,intensity_class,bit,basis")?;
    for p in pulses {
        writeln!(w, "{},{},{},{}", p.time_ps, p.intensity_class, p.bit, p.basis)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> TimeTagStream {
        TimeTagStream::from_records(Segment::Space, vec![(5, 1), (1, 0), (1_000_000_000_000, 3), (7, 2)])
    }

    #[test]
    fn empty_stream_is_header_only() {
        let b = TimeTagStream::new(Segment::Ground).to_bytes();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(&b[..4], MAGIC);
        assert!(TimeTagStream::from_bytes(&b).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_reports_offset() {
        let mut b = sample().to_bytes();
        b.truncate(b.len() - 4);
        match TimeTagStream::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (HEADER_LEN + 3 * RECORD_LEN) as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(TimeTagStream::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(matches!(TimeTagStream::from_bytes(&b), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(TimeTagStream::from_bytes(&b[..10]), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn unsorted_and_bad_channel_rejected() {
        let mut b = sample().to_bytes();
        // swap the first two time fields
        let (r0, r1) = (HEADER_LEN, HEADER_LEN + RECORD_LEN);
        let first: Vec<u8> = b[r0..r0 + 8].to_vec();
        let second: Vec<u8> = b[r1..r1 + 8].to_vec();
        b[r0..r0 + 8].copy_from_slice(&second);
        b[r1..r1 + 8].copy_from_slice(&first);
        assert!(matches!(TimeTagStream::from_bytes(&b), Err(Error::Format { offset, .. }) if offset == r1 as u64));
        let mut b = sample().to_bytes();
        b[HEADER_LEN + 8] = 4;
        assert!(matches!(TimeTagStream::from_bytes(&b), Err(Error::Format { offset, .. }) if offset == HEADER_LEN as u64 + 8));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let s = sample();
        let mut v = Vec::new();
        s.write_csv(&mut v).unwrap();
        assert_eq!(TimeTagStream::read_csv(Segment::Space, &v[..]).unwrap(), s);
        let bad = b"time_ps,channel\n5,0\n3,1\n";
        assert!(matches!(TimeTagStream::read_csv(Segment::Space, &bad[..]), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn channel_encoding() {
        for b in 0..2 {
            for o in 0..2 {
                let c = channel(b, o);
                assert!(c < N_CHANNELS);
                assert_eq!((basis_of(c), outcome_of(c)), (b, o));
            }
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip(mut recs in prop::collection::vec((any::<u64>(), 0u8..4), 0..300)) {
            recs.sort();
            let s = TimeTagStream::from_records(Segment::Ground, recs);
            let b = s.to_bytes();
            prop_assert_eq!(b.len(), HEADER_LEN + RECORD_LEN * s.len());
            prop_assert_eq!(TimeTagStream::from_bytes(&b).unwrap(), s);
        }
    }
}
