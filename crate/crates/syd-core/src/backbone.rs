//! Feature-map producers: a small trainable reference CNN (five stride-2
//! conv-BN-ReLU blocks, 224 -> 7x7) and the SYDF binary format for features
//! exported from larger backbones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SydError};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{BnIds, BnLayer, Scalar, Tensor};

/// Where a feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    ReferenceCnn,
    Imported,
}

/// A batch of backbone features, [b,h,w,c].
#[derive(Clone, Debug)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
    pub source: FeatureSource,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BnLayer<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockIds {
    pub weight: TensorId,
    pub bias: TensorId,
    pub bn: BnIds,
}

/// Five conv-BN-ReLU blocks, each 3x3 stride-2 pad-1, so the spatial size
/// halves per block: 224 -> 7, 64 -> 2. Channel widths double from 16 up to
/// the configured output width.
#[derive(Clone, Debug)]
pub struct ReferenceCnn<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub out_channels: usize,
}

pub const REFERENCE_BLOCKS: usize = 5;
pub const REFERENCE_STRIDE_TOTAL: usize = 1 << REFERENCE_BLOCKS;

impl<T: Scalar> ReferenceCnn<T> {
    pub fn init(out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(REFERENCE_BLOCKS);
        let mut cin = 3usize;
        for i in 0..REFERENCE_BLOCKS {
            let cout = if i == REFERENCE_BLOCKS - 1 {
                out_channels
            } else {
                (16usize << i).min(out_channels)
            };
            let fan_in = 9 * cin;
            let fan_out = 9 * cout;
            blocks.push(ConvBlock {
                weight: Tensor::glorot_uniform(vec![3, 3, cin, cout], fan_in, fan_out, rng)
                    .with_requires_grad(),
                bias: Tensor::zeros(vec![cout]).with_requires_grad(),
                bn: BnLayer::new(cout),
            });
            cin = cout;
        }
        Self {
            blocks,
            out_channels,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<ConvBlockIds> {
        self.blocks
            .iter()
            .map(|b| ConvBlockIds {
                weight: tape.leaf(&b.weight),
                bias: tape.leaf(&b.bias),
                bn: b.bn.bind(tape),
            })
            .collect()
    }

    /// Forward [b,s,s,3] -> [b, s/32, s/32, out_channels].
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        ids: &[ConvBlockIds],
        images: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(SydError::ShapeMismatch {
                op: "reference_cnn",
                lhs: shape,
                rhs: vec![0, 0, 0, 3],
            });
        }
        if shape[1] % REFERENCE_STRIDE_TOTAL != 0 || shape[2] % REFERENCE_STRIDE_TOTAL != 0 {
            return Err(SydError::ShapeMismatch {
                op: "reference_cnn (input side must be divisible by 32)",
                lhs: shape,
                rhs: vec![REFERENCE_STRIDE_TOTAL],
            });
        }
        let mut x = images;
        for (block, bid) in self.blocks.iter_mut().zip(ids) {
            x = tape.conv2d(x, bid.weight, bid.bias, 2, 1)?;
            x = tape.batch_norm(x, bid.bn.gamma, bid.bn.beta, &mut block.bn.running, training)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    pub fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("{prefix}.block{i}.weight"), &mut b.weight);
            f(format!("{prefix}.block{i}.bias"), &mut b.bias);
            f(format!("{prefix}.block{i}.bn.gamma"), &mut b.bn.gamma);
            f(format!("{prefix}.block{i}.bn.beta"), &mut b.bn.beta);
        }
    }

    pub fn walk_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("{prefix}.block{i}.bn.running_mean"), &mut b.bn.running.mean);
            f(format!("{prefix}.block{i}.bn.running_var"), &mut b.bn.running.var);
        }
    }
}

// ── SYDF feature files ──────────────────────────────────────────────────
//
// Little-endian layout:
//   magic "SYDF" | u32 version=1 | u32 record_count | u32 h | u32 w | u32 c
//   then record_count * { u32 label, h*w*c * f32 }

pub const SYDF_MAGIC: &[u8; 4] = b"SYDF";
pub const SYDF_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SydfHeader {
    pub record_count: u32,
    pub h: u32,
    pub w: u32,
    pub c: u32,
}

impl SydfHeader {
    pub fn record_values(&self) -> usize {
        (self.h * self.w * self.c) as usize
    }
}

/// Writes a SYDF file with a record count fixed up front.
pub struct SydfWriter {
    out: BufWriter<File>,
    header: SydfHeader,
    written: u32,
}

impl SydfWriter {
    pub fn create(path: &Path, header: SydfHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| SydError::from(e).with_path(path))?;
        let mut out = BufWriter::new(file);
        out.write_all(SYDF_MAGIC)?;
        out.write_all(&SYDF_VERSION.to_le_bytes())?;
        out.write_all(&header.record_count.to_le_bytes())?;
        out.write_all(&header.h.to_le_bytes())?;
        out.write_all(&header.w.to_le_bytes())?;
        out.write_all(&header.c.to_le_bytes())?;
        Ok(Self {
            out,
            header,
            written: 0,
        })
    }

    pub fn add_record(&mut self, label: u32, values: &[f32]) -> Result<()> {
        if values.len() != self.header.record_values() {
            return Err(SydError::ShapeMismatch {
                op: "sydf record",
                lhs: vec![values.len()],
                rhs: vec![self.header.record_values()],
            });
        }
        if self.written == self.header.record_count {
            return Err(SydError::Format {
                offset: 0,
                message: format!(
                    "more records than the declared count {}",
                    self.header.record_count
                ),
            });
        }
        self.out.write_all(&label.to_le_bytes())?;
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.record_count {
            return Err(SydError::Format {
                offset: 0,
                message: format!(
                    "declared {} records but wrote {}",
                    self.header.record_count, self.written
                ),
            });
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Streaming SYDF reader; yields (label, values) pairs and validates the
/// trailer. Errors carry the byte offset of the failure.
pub struct SydfReader {
    input: BufReader<File>,
    header: SydfHeader,
    next_record: u32,
    offset: u64,
}

impl SydfReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SydError::from(e).with_path(path))?;
        let mut input = BufReader::new(file);
        let mut offset = 0u64;

        let mut magic = [0u8; 4];
        read_exact_at(&mut input, &mut magic, &mut offset, "magic")?;
        if &magic != SYDF_MAGIC {
            return Err(SydError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {SYDF_MAGIC:?}"),
            });
        }
        let version = read_u32(&mut input, &mut offset, "version")?;
        if version != SYDF_VERSION {
            return Err(SydError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let record_count = read_u32(&mut input, &mut offset, "record count")?;
        let h = read_u32(&mut input, &mut offset, "height")?;
        let w = read_u32(&mut input, &mut offset, "width")?;
        let c = read_u32(&mut input, &mut offset, "channels")?;
        if h == 0 || w == 0 || c == 0 {
            return Err(SydError::Format {
                offset: 12,
                message: format!("degenerate geometry {h}x{w}x{c}"),
            });
        }
        Ok(Self {
            input,
            header: SydfHeader {
                record_count,
                h,
                w,
                c,
            },
            next_record: 0,
            offset,
        })
    }

    pub fn header(&self) -> SydfHeader {
        self.header
    }

    fn read_record(&mut self) -> Result<(u32, Vec<f32>)> {
        let label = read_u32(&mut self.input, &mut self.offset, "record label")?;
        let n = self.header.record_values();
        let mut bytes = vec![0u8; n * 4];
        read_exact_at(&mut self.input, &mut bytes, &mut self.offset, "record data")?;
        let values = bytes
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
            .collect();
        self.next_record += 1;
        Ok((label, values))
    }

    /// After the declared records, the file must end exactly.
    fn check_trailer(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(SydError::Format {
                offset: self.offset,
                message: format!(
                    "trailing bytes after the declared {} records",
                    self.header.record_count
                ),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Iterator for SydfReader {
    type Item = Result<(u32, Vec<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_record >= self.header.record_count {
            return match self.check_trailer() {
                Ok(()) => None,
                Err(e) => {
                    // poison further iteration
                    self.next_record = u32::MAX;
                    Some(Err(e))
                }
            };
        }
        Some(self.read_record())
    }
}

fn read_exact_at(
    input: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    match input.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(SydError::Format {
            offset: *offset,
            message: format!("truncated while reading {what}"),
        }),
        Err(e) => Err(e.into()),
    }
}

fn read_u32(input: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(input, &mut b, offset, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Read a whole SYDF file into frozen feature tensors with labels.
pub fn load_features(path: &Path) -> Result<(SydfHeader, Vec<(Tensor<f32>, u32)>)> {
    let reader = SydfReader::open(path)?;
    let header = reader.header();
    let shape = vec![header.h as usize, header.w as usize, header.c as usize];
    let mut records = Vec::with_capacity(header.record_count as usize);
    for item in reader {
        let (label, values) = item?;
        records.push((Tensor::new(shape.clone(), values)?, label));
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::io::Seek;

    #[test]
    fn reference_cnn_halves_five_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cnn: ReferenceCnn<f32> = ReferenceCnn::init(8, &mut rng);
        let mut tape = Tape::new();
        let ids = cnn.bind(&mut tape);

        let images = tape
            .constant(vec![1, 224, 224, 3], vec![0.5; 224 * 224 * 3])
            .unwrap();
        let f = cnn.forward(&mut tape, &ids, images, false).unwrap();
        assert_eq!(tape.shape(f), &[1, 7, 7, 8]);

        let images = tape.constant(vec![2, 64, 64, 3], vec![0.1; 2 * 64 * 64 * 3]).unwrap();
        let f = cnn.forward(&mut tape, &ids, images, false).unwrap();
        assert_eq!(tape.shape(f), &[2, 2, 2, 8]);
    }

    #[test]
    fn reference_cnn_default_width_is_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cnn: ReferenceCnn<f32> = ReferenceCnn::init(128, &mut rng);
        let widths: Vec<usize> = cnn.blocks.iter().map(|b| b.weight.shape()[3]).collect();
        assert_eq!(widths, [16, 32, 64, 128, 128]);
    }

    #[test]
    fn reference_cnn_preserves_batch_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cnn: ReferenceCnn<f32> = ReferenceCnn::init(4, &mut rng);
        let mut tape = Tape::new();
        let ids = cnn.bind(&mut tape);
        let images = tape.constant(vec![8, 32, 32, 3], vec![0.2; 8 * 32 * 32 * 3]).unwrap();
        let f = cnn.forward(&mut tape, &ids, images, true).unwrap();
        assert_eq!(tape.shape(f)[0], 8);
    }

    #[test]
    fn reference_cnn_rejects_unaligned_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cnn: ReferenceCnn<f32> = ReferenceCnn::init(4, &mut rng);
        let mut tape = Tape::new();
        let ids = cnn.bind(&mut tape);
        let images = tape.constant(vec![1, 100, 100, 3], vec![0.0; 100 * 100 * 3]).unwrap();
        assert!(matches!(
            cnn.forward(&mut tape, &ids, images, false),
            Err(SydError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sydf_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.sydf");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let header = SydfHeader { record_count: 3, h: 2, w: 3, c: 4 };
        let records: Vec<(u32, Vec<f32>)> = (0..3)
            .map(|i| {
                let vals: Vec<f32> = (0..24).map(|_| rng.random_range(-10.0..10.0)).collect();
                (i * 7, vals)
            })
            .collect();

        let mut writer = SydfWriter::create(&path, header).unwrap();
        for (label, vals) in &records {
            writer.add_record(*label, vals).unwrap();
        }
        writer.finish().unwrap();

        let (read_header, loaded) = load_features(&path).unwrap();
        assert_eq!(read_header, header);
        for ((label, vals), (tensor, read_label)) in records.iter().zip(&loaded) {
            assert_eq!(label, read_label);
            assert_eq!(tensor.shape(), &[2, 3, 4]);
            assert_eq!(
                vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert!(!tensor.requires_grad());
        }
    }

    #[test]
    fn sydf_single_record_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.sydf");
        let header = SydfHeader { record_count: 1, h: 7, w: 7, c: 12 };
        let values: Vec<f32> = (0..7 * 7 * 12).map(|i| i as f32 * 0.5).collect();
        let mut writer = SydfWriter::create(&path, header).unwrap();
        writer.add_record(3, &values).unwrap();
        writer.finish().unwrap();

        let (h, records) = load_features(&path).unwrap();
        assert_eq!(h.record_count, 1);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].1, 3);
        assert_eq!(records[0].0.data(), &values[..]);
    }

    #[test]
    fn sydf_detects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sydf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = SydfReader::open(&path).map(|_| ()).unwrap_err();
        assert!(matches!(err, SydError::Format { offset: 0, .. }));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(SYDF_MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        let err = SydfReader::open(&path).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn sydf_detects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.sydf");
        let header = SydfHeader { record_count: 2, h: 1, w: 1, c: 2 };
        let mut writer = SydfWriter::create(&path, header).unwrap();
        writer.add_record(0, &[1.0, 2.0]).unwrap();
        writer.add_record(1, &[3.0, 4.0]).unwrap();
        writer.finish().unwrap();

        // chop the last 4 bytes: second record truncated
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        let result: Result<Vec<_>> = SydfReader::open(&path).unwrap().collect();
        let err = result.unwrap_err();
        assert!(matches!(err, SydError::Format { .. }), "{err}");
        assert!(err.to_string().contains("byte"), "offset reported: {err}");

        // trailing garbage: more records present than declared
        let mut extended = full.clone();
        extended.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, extended).unwrap();
        let result: Result<Vec<_>> = SydfReader::open(&path).unwrap().collect();
        assert!(result.is_err());

        // writer refuses a count mismatch
        let w = SydfWriter::create(&path, header).unwrap();
        assert!(w.finish().is_err());
        let _ = std::fs::File::open(&path).unwrap().seek(std::io::SeekFrom::Start(0));
    }
}
