use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::language::LanguageSpec;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ARDT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub transcript: Vec<usize>,
    pub frames: Tensor,
    /// Frame index where each symbol starts, plus the total frame count.
    pub boundaries: Vec<usize>,
    pub offset: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_mel: usize,
    pub utterances: Vec<SynthUtterance>,
}

/// Random transcripts with lengths drawn uniformly from `min_len..=max_len`.
pub fn gen_dataset<R: Rng>(spec: &LanguageSpec, n: usize, min_len: usize, max_len: usize, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    ensure!(min_len >= 1 && min_len <= max_len, Config, "bad transcript length range {min_len}..={max_len}");
    let mut utterances = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(min_len..=max_len);
        let transcript: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.alphabet)).collect();
        let offset = spec.sample_offset(rng);
        let (frames, boundaries) = spec.render(&transcript, &offset, rng)?;
        utterances.push(SynthUtterance {
            transcript,
            frames,
            boundaries,
            offset,
        });
    }
    Ok(Dataset {
        d_mel: spec.d_mel,
        utterances,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("value {v} exceeds 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        ensure!(self.pos + n <= self.bytes.len(), Format, "dataset truncated at byte {}", self.pos);
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

impl Dataset {
    /// Layout: magic, version, utterance count, feature dim, then per
    /// utterance the symbol count, frame count, symbols, boundaries, offset
    /// and frames. Integers are little-endian u32, reals little-endian f32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION as usize)?;
        put_u32(&mut buf, self.utterances.len())?;
        put_u32(&mut buf, self.d_mel)?;
        for u in &self.utterances {
            ensure!(u.frames.cols() == self.d_mel && u.offset.len() == self.d_mel, Input, "utterance width mismatch");
            ensure!(u.boundaries.len() == u.transcript.len() + 1, Input, "boundaries must have one entry per symbol plus one");
            put_u32(&mut buf, u.transcript.len())?;
            put_u32(&mut buf, u.frames.rows())?;
            for &s in u.transcript.iter().chain(&u.boundaries) {
                put_u32(&mut buf, s)?;
            }
            for v in u.offset.iter().chain(u.frames.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Format, "not a dataset file (bad magic)");
        let version = r.u32()?;
        ensure!(version == VERSION as usize, Format, "unsupported dataset version {version}");
        let n = r.u32()?;
        let d_mel = r.u32()?;
        let mut utterances = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let n_sym = r.u32()?;
            let n_frames = r.u32()?;
            let transcript = r.u32s(n_sym)?;
            let boundaries = r.u32s(n_sym + 1)?;
            let offset = r.f32s(d_mel)?;
            let frames = Tensor::from_vec(n_frames, d_mel, r.f32s(n_frames * d_mel)?)?;
            utterances.push(SynthUtterance {
                transcript,
                frames,
                boundaries,
                offset,
            });
        }
        ensure!(r.pos == bytes.len(), Format, "{} trailing bytes in dataset", bytes.len() - r.pos);
        Ok(Self { d_mel, utterances })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".txt");
        PathBuf::from(s)
    }

    /// Write the binary file plus a readable transcript listing next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        let mut side = fs::File::create(Self::sidecar_path(path))?;
        for (i, u) in self.utterances.iter().enumerate() {
            let syms: Vec<String> = u.transcript.iter().map(|s| s.to_string()).collect();
            writeln!(side, "{i}\t{}\t{}", u.frames.rows(), syms.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn frames(&self) -> Vec<Tensor> {
        self.utterances.iter().map(|u| u.frames.clone()).collect()
    }
}
