//! Range coding of code blocks with the post entropy model.
//!
//! Probabilities are turned into integer frequencies summing to `2^16`,
//! and a 32-bit range coder with carry propagation (the LZMA scheme)
//! writes the symbols in canonical order: groups ascending, lexicographic
//! `(r, p, q)` inside a group. The coder state is integer-only, so two
//! machines that agree on the frequency tables agree on every byte.
//!
//! Stream layout (little-endian): magic `NLCB`, version `u8`, image height
//! `u16`, image width `u16`, `M` as `u16`, `L` as `u8`, model hash `u64`,
//! then the payload.

use crate::ccn::GroupSchedule;
use crate::entropy::floor_row;
use crate::error::{Error, Result};
use crate::infer::CodingModel;
use crate::quantizer::CodeBlock;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;

pub const STREAM_MAGIC: &[u8; 4] = b"NLCB";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

/// Cumulative frequencies over `L` symbols, `cum[0] = 0`, `cum[L] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    /// Code length of symbol `s` in bits.
    pub fn bits(&self, s: usize) -> f64 {
        FREQ_BITS as f64 - (self.freq(s) as f64).log2()
    }
}

/// Largest-remainder apportionment of `2^16` with a floor of one count
/// per symbol. Exact remainder ties go to the lower index.
pub fn freq_quantize(row: &[f64]) -> FreqTable {
    let l = row.len();
    assert!((2..=FREQ_TOTAL as usize / 2).contains(&l), "frequency table needs 2.. symbols");
    let p = floor_row(row);
    let spare = (FREQ_TOTAL as usize - l) as f64;
    let mut freq = vec![1u32; l];
    let mut rem = Vec::with_capacity(l);
    let mut used = 0u32;
    for (i, &pi) in p.iter().enumerate() {
        let ideal = pi * spare;
        let base = ideal.floor();
        freq[i] += base as u32;
        used += base as u32;
        rem.push((ideal - base, i));
    }
    let left = FREQ_TOTAL - l as u32 - used;
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rem.iter().take(left as usize) {
        freq[i] += 1;
    }
    let mut cum = Vec::with_capacity(l + 1);
    cum.push(0);
    let mut acc = 0;
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, FREQ_TOTAL);
    FreqTable { cum }
}

#[inline]
fn split(range: u32, cum: &[u32], s: usize) -> (u32, u32) {
    let r = range as u64;
    let lo = ((r * cum[s] as u64) >> FREQ_BITS) as u32;
    let hi = if s + 1 == cum.len() - 1 {
        range
    } else {
        ((r * cum[s + 1] as u64) >> FREQ_BITS) as u32
    };
    (lo, hi)
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                // the very first byte is always zero and is not stored
                if self.started {
                    self.out.push(temp.wrapping_add(carry));
                } else {
                    self.started = true;
                }
                temp = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, table: &FreqTable, s: usize) {
        let (lo, hi) = split(self.range, &table.cum, s);
        self.low += lo as u64;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            buf,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte()? as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| Error::CorruptStream("payload ends early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        if self.code >= self.range {
            return Err(Error::CorruptStream("coder state out of range".into()));
        }
        let n = table.symbols();
        let mut s = 0;
        while s + 1 < n && split(self.range, &table.cum, s + 1).0 <= self.code {
            s += 1;
        }
        let (lo, hi) = split(self.range, &table.cum, s);
        self.code -= lo;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.byte()? as u32;
        }
        Ok(s)
    }

    /// Fails unless every payload byte has been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptStream(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub levels: u8,
    pub model_hash: u64,
}

impl Header {
    /// Code block dims implied by the image dims.
    pub fn code_dims(&self) -> (usize, usize, usize) {
        (
            self.channels as usize,
            (self.height as usize).div_ceil(8),
            (self.width as usize).div_ceil(8),
        )
    }
}

pub fn pack_header(h: &Header) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(STREAM_MAGIC);
    out[4] = STREAM_VERSION;
    out[5..7].copy_from_slice(&h.height.to_le_bytes());
    out[7..9].copy_from_slice(&h.width.to_le_bytes());
    out[9..11].copy_from_slice(&h.channels.to_le_bytes());
    out[11] = h.levels;
    out[12..20].copy_from_slice(&h.model_hash.to_le_bytes());
    out
}

pub fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_LEN {
        return Err(Error::Format(format!("stream shorter than the {HEADER_LEN}-byte header")));
    }
    if &b[..4] != STREAM_MAGIC {
        return Err(Error::Format("not an nlcodec stream (bad magic)".into()));
    }
    if b[4] != STREAM_VERSION {
        return Err(Error::Format(format!("unsupported stream version {}", b[4])));
    }
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let h = Header {
        height: u16_at(5),
        width: u16_at(7),
        channels: u16_at(9),
        levels: b[11],
        model_hash: u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")),
    };
    if h.height == 0 || h.width == 0 || h.channels == 0 || h.levels < 2 {
        return Err(Error::Format("header has empty dimensions".into()));
    }
    Ok(h)
}

fn check_block(y: &CodeBlock, model: &CodingModel) -> Result<()> {
    let (m, _, _) = y.dims();
    if m != model.channels() {
        return Err(Error::ModelMismatch(format!(
            "code block has {m} channels, model has {}",
            model.channels()
        )));
    }
    if y.max_index() as usize >= model.levels() {
        return Err(Error::Usage(format!(
            "code index {} out of range for L={}",
            y.max_index(),
            model.levels()
        )));
    }
    Ok(())
}

/// Frequency tables of every code in canonical order (teacher forced).
pub fn canonical_tables(y: &CodeBlock, model: &CodingModel) -> Result<Vec<FreqTable>> {
    check_block(y, model)?;
    let (m, h, w) = y.dims();
    let rows = model.teacher_forced(y, true)?;
    Ok(GroupSchedule::new(m, h, w)
        .canonical_order()
        .into_iter()
        .map(|(r, p, q)| freq_quantize(&rows[y.offset(r, p, q)]))
        .collect())
}

/// Ideal code length of `y` under the quantized tables, in bits.
pub fn ideal_bits(y: &CodeBlock, model: &CodingModel) -> Result<f64> {
    let (m, h, w) = y.dims();
    let tables = canonical_tables(y, model)?;
    Ok(GroupSchedule::new(m, h, w)
        .canonical_order()
        .into_iter()
        .zip(&tables)
        .map(|((r, p, q), t)| t.bits(y.get(r, p, q) as usize))
        .sum())
}

/// Payload bytes for `y`.
pub fn encode_block(y: &CodeBlock, model: &CodingModel) -> Result<Vec<u8>> {
    let (m, h, w) = y.dims();
    let tables = canonical_tables(y, model)?;
    let mut enc = RangeEncoder::new();
    for ((r, p, q), t) in GroupSchedule::new(m, h, w).canonical_order().into_iter().zip(&tables) {
        enc.encode(t, y.get(r, p, q) as usize);
    }
    Ok(enc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// One evaluation per group, members evaluated in parallel.
    GroupParallel,
    /// A fresh full evaluation before every symbol, no parallelism.
    Serial,
}

pub fn decode_block(payload: &[u8], model: &CodingModel, dims: (usize, usize, usize), mode: DecodeMode) -> Result<CodeBlock> {
    let (m, h, w) = dims;
    if m != model.channels() {
        return Err(Error::ModelMismatch(format!(
            "stream has {m} channels, model has {}",
            model.channels()
        )));
    }
    let sched = GroupSchedule::new(m, h, w);
    let mut y = CodeBlock::zeros(m, h, w)?;
    let mut dec = RangeDecoder::new(payload)?;
    match mode {
        DecodeMode::GroupParallel => {
            let mut session = model.session(h, w, true);
            for k in 0..sched.num_groups() {
                let rows = session.eval_group(k)?;
                for ((r, p, q), row) in sched.group(k).into_iter().zip(rows) {
                    let s = dec.decode(&freq_quantize(&row))?;
                    y.set(r, p, q, s as u8);
                    session.set_code(r, p, q, s as u8)?;
                }
            }
        }
        DecodeMode::Serial => {
            for (r, p, q) in sched.canonical_order() {
                let rows = model.teacher_forced(&y, false)?;
                let s = dec.decode(&freq_quantize(&rows[y.offset(r, p, q)]))?;
                y.set(r, p, q, s as u8);
            }
        }
    }
    dec.finish()?;
    Ok(y)
}

/// Full stream: header followed by the payload.
pub fn encode_stream(y: &CodeBlock, model: &CodingModel, image_dims: (usize, usize), model_hash: u64) -> Result<Vec<u8>> {
    let (m, h, w) = y.dims();
    let (hi, wi) = image_dims;
    if hi.div_ceil(8) != h || wi.div_ceil(8) != w {
        return Err(Error::Usage(format!(
            "image {hi}x{wi} does not match code block {h}x{w}"
        )));
    }
    if hi > u16::MAX as usize || wi > u16::MAX as usize || m > u16::MAX as usize || model.levels() > u8::MAX as usize {
        return Err(Error::Usage("dimensions exceed the header field widths".into()));
    }
    let header = Header {
        height: hi as u16,
        width: wi as u16,
        channels: m as u16,
        levels: model.levels() as u8,
        model_hash,
    };
    let mut out = pack_header(&header).to_vec();
    out.extend(encode_block(y, model)?);
    Ok(out)
}

pub fn decode_stream(bytes: &[u8], model: &CodingModel, model_hash: u64, mode: DecodeMode) -> Result<(Header, CodeBlock)> {
    let header = parse_header(bytes)?;
    if header.model_hash != model_hash {
        return Err(Error::ModelMismatch(format!(
            "stream was written with model {:016x}, loaded model is {model_hash:016x}",
            header.model_hash
        )));
    }
    if header.levels as usize != model.levels() {
        return Err(Error::ModelMismatch(format!(
            "stream has L={}, model has L={}",
            header.levels,
            model.levels()
        )));
    }
    let y = decode_block(&bytes[HEADER_LEN..], model, header.code_dims(), mode)?;
    Ok((header, y))
}

/// `8·bytes / (H·W)`.
pub fn bpp(stream_len: usize, height: usize, width: usize) -> f64 {
    8.0 * stream_len as f64 / (height * width) as f64
}
