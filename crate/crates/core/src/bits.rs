//! Packed bit sequences and the streaming bit sources/sinks used across the
//! pipeline.
//!
//! Every packed representation in this crate is LSB-first: bit `i` of a
//! sequence lives in byte `i / 8` at bit position `i % 8`, which is the same
//! as word `i / 64`, position `i % 64` for little-endian `u64` words.

use std::fmt;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// An ordered bit sequence packed into `u64` words.
///
/// Bits past `len` in the last word are always zero.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitBlock {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BitBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        BitBlock {
            words: Vec::with_capacity(words_for(bits)),
            len: 0,
        }
    }

    pub fn zeros(len: usize) -> Self {
        BitBlock {
            words: vec![0; words_for(len)],
            len,
        }
    }

    /// Builds a block from words, clearing anything above `len`.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.resize(words_for(len), 0);
        let mut block = BitBlock { words, len };
        block.clear_tail();
        block
    }

    /// Builds a block from `0`/`1` values; any nonzero byte counts as one.
    pub fn from_bits(bits: &[u8]) -> Self {
        bits.iter().map(|&b| b != 0).collect()
    }

    /// Unpacks the first `len` bits of an LSB-first byte string.
    pub fn from_bytes_lsb(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() * 8 < len {
            return Err(Error::contract(format!(
                "{} bytes cannot supply {len} bits",
                bytes.len()
            )));
        }
        let mut words = vec![0u64; words_for(len)];
        for (i, &b) in bytes.iter().take(len.div_ceil(8)).enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        Ok(Self::from_words(words, len))
    }

    /// Expands n-bit samples into a bit sequence, LSB-first within each sample.
    pub fn from_samples(codes: &[u16], n: u8) -> Self {
        let mut block = BitBlock::with_capacity(codes.len() * n as usize);
        let mask = low_mask(n as usize);
        for &code in codes {
            block.push_bits(code as u64 & mask, n as usize);
        }
        block
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn push(&mut self, bit: bool) {
        self.push_bits(bit as u64, 1);
    }

    /// Appends the low `count` bits of `value` (count ≤ 64), LSB first.
    #[inline]
    pub fn push_bits(&mut self, value: u64, count: usize) {
        debug_assert!(count <= 64);
        if count == 0 {
            return;
        }
        let value = value & low_mask(count);
        let offset = self.len % 64;
        if offset == 0 {
            self.words.push(value);
        } else {
            *self.words.last_mut().unwrap() |= value << offset;
            if offset + count > 64 {
                self.words.push(value >> (64 - offset));
            }
        }
        self.len += count;
    }

    pub fn extend_from(&mut self, other: &BitBlock) {
        let full = other.len / 64;
        for &w in &other.words[..full] {
            self.push_bits(w, 64);
        }
        let rest = other.len % 64;
        if rest > 0 {
            self.push_bits(other.words[full], rest);
        }
    }

    /// Copies `len` bits starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> BitBlock {
        assert!(start + len <= self.len, "slice out of range");
        let mut out = BitBlock::with_capacity(len);
        let mut pos = start;
        let end = start + len;
        while pos < end {
            let take = (end - pos).min(64);
            out.push_bits(self.read_word_at(pos), take);
            pos += take;
        }
        out
    }

    /// 64 bits starting at an arbitrary bit offset (zero-filled past the end).
    #[inline]
    pub(crate) fn read_word_at(&self, pos: usize) -> u64 {
        let q = pos / 64;
        let s = pos % 64;
        let lo = self.words.get(q).copied().unwrap_or(0);
        if s == 0 {
            lo
        } else {
            let hi = self.words.get(q + 1).copied().unwrap_or(0);
            (lo >> s) | (hi << (64 - s))
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bitwise XOR of two equal-length blocks.
    pub fn xor(&self, other: &BitBlock) -> Result<BitBlock> {
        if self.len != other.len {
            return Err(Error::contract(format!(
                "xor of blocks with lengths {} and {}",
                self.len, other.len
            )));
        }
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a ^ b)
            .collect();
        Ok(BitBlock {
            words,
            len: self.len,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| (self.words[i / 64] >> (i % 64)) & 1 == 1)
    }

    /// Packs the block into LSB-first bytes; the final byte is zero-padded.
    pub fn to_bytes_lsb(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect()
    }

    fn clear_tail(&mut self) {
        let rest = self.len % 64;
        if rest > 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= low_mask(rest);
            }
        }
    }
}

impl FromIterator<bool> for BitBlock {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut block = BitBlock::new();
        for bit in iter {
            block.push(bit);
        }
        block
    }
}

impl fmt::Debug for BitBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitBlock[{}](", self.len)?;
        for (i, bit) in self.iter().enumerate() {
            if i == 256 {
                f.write_str("…")?;
                break;
            }
            f.write_str(if bit { "1" } else { "0" })?;
        }
        f.write_str(")")
    }
}

#[inline]
pub(crate) fn low_mask(count: usize) -> u64 {
    if count >= 64 {
        u64::MAX
    } else {
        (1u64 << count) - 1
    }
}

/// A pull-based stream of bits.
pub trait BitSource {
    /// Appends up to `want` bits to `dst` and returns how many were appended.
    /// Zero means the stream is exhausted.
    fn read_bits(&mut self, dst: &mut BitBlock, want: usize) -> Result<usize>;

    /// Reads until `want` bits were appended or the stream ends.
    fn read_up_to(&mut self, dst: &mut BitBlock, want: usize) -> Result<usize> {
        let mut got = 0;
        while got < want {
            let n = self.read_bits(dst, want - got)?;
            if n == 0 {
                break;
            }
            got += n;
        }
        Ok(got)
    }
}

/// Reads bits out of an in-memory block.
pub struct SliceBits<'a> {
    block: &'a BitBlock,
    pos: usize,
}

impl<'a> SliceBits<'a> {
    pub fn new(block: &'a BitBlock) -> Self {
        SliceBits { block, pos: 0 }
    }
}

impl BitSource for SliceBits<'_> {
    fn read_bits(&mut self, dst: &mut BitBlock, want: usize) -> Result<usize> {
        let take = want.min(self.block.len() - self.pos);
        let end = self.pos + take;
        while self.pos < end {
            let n = (end - self.pos).min(64);
            dst.push_bits(self.block.read_word_at(self.pos), n);
            self.pos += n;
        }
        Ok(take)
    }
}

const READ_BUF: usize = 1 << 16;

/// Packed LSB-first bytes from any reader.
pub struct ByteBits<R> {
    inner: R,
    buf: Vec<u8>,
    filled: usize,
    cursor_bits: usize,
    offset: u64,
}

impl<R: Read> ByteBits<R> {
    pub fn new(inner: R) -> Self {
        ByteBits {
            inner,
            buf: vec![0; READ_BUF],
            filled: 0,
            cursor_bits: 0,
            offset: 0,
        }
    }
}

impl<R: Read> BitSource for ByteBits<R> {
    fn read_bits(&mut self, dst: &mut BitBlock, want: usize) -> Result<usize> {
        if self.cursor_bits == self.filled * 8 {
            self.offset += self.filled as u64;
            self.filled = read_some(&mut self.inner, &mut self.buf, self.offset)?;
            self.cursor_bits = 0;
            if self.filled == 0 {
                return Ok(0);
            }
        }
        let avail = self.filled * 8 - self.cursor_bits;
        let take = want.min(avail);
        let mut done = 0;
        while done < take {
            let pos = self.cursor_bits + done;
            let n = (take - done).min(56);
            let byte = pos / 8;
            let mut word = [0u8; 8];
            let end = (byte + 8).min(self.filled);
            word[..end - byte].copy_from_slice(&self.buf[byte..end]);
            dst.push_bits(u64::from_le_bytes(word) >> (pos % 8), n);
            done += n;
        }
        self.cursor_bits += take;
        Ok(take)
    }
}

/// n-bit samples stored as 16-bit little-endian words; each sample contributes
/// its low `n` bits, LSB first. A sample split across two reads keeps its
/// remaining bits for the next one.
pub struct SampleBits<R> {
    inner: R,
    n: usize,
    buf: Vec<u8>,
    filled: usize,
    cursor: usize,
    offset: u64,
    pending: u64,
    pending_len: usize,
}

impl<R: Read> SampleBits<R> {
    pub fn new(inner: R, n: u8) -> Self {
        SampleBits {
            inner,
            n: n as usize,
            buf: vec![0; READ_BUF],
            filled: 0,
            cursor: 0,
            offset: 0,
            pending: 0,
            pending_len: 0,
        }
    }

    /// Makes at least one whole sample available; false at end of stream.
    fn fill(&mut self) -> Result<bool> {
        if self.cursor + 2 <= self.filled {
            return Ok(true);
        }
        let rest = self.filled - self.cursor;
        self.buf.copy_within(self.cursor..self.filled, 0);
        self.offset += self.cursor as u64;
        let got = read_some(&mut self.inner, &mut self.buf[rest..], self.offset + rest as u64)?;
        self.filled = rest + got;
        self.cursor = 0;
        match self.filled {
            0 => Ok(false),
            1 => Err(Error::io_at(
                self.offset,
                io::Error::new(io::ErrorKind::UnexpectedEof, "truncated 16-bit sample"),
            )),
            _ => Ok(true),
        }
    }

    fn next_code(&mut self) -> u64 {
        let at = self.cursor;
        self.cursor += 2;
        u16::from_le_bytes([self.buf[at], self.buf[at + 1]]) as u64 & low_mask(self.n)
    }
}

impl<R: Read> BitSource for SampleBits<R> {
    fn read_bits(&mut self, dst: &mut BitBlock, want: usize) -> Result<usize> {
        if want == 0 {
            return Ok(0);
        }
        if self.pending_len > 0 {
            let take = want.min(self.pending_len);
            dst.push_bits(self.pending, take);
            self.pending >>= take;
            self.pending_len -= take;
            return Ok(take);
        }
        if !self.fill()? {
            return Ok(0);
        }
        let whole = (want / self.n).min((self.filled - self.cursor) / 2);
        for _ in 0..whole {
            let code = self.next_code();
            dst.push_bits(code, self.n);
        }
        let mut done = whole * self.n;
        let part = want - done;
        if part > 0 && part < self.n && self.cursor + 2 <= self.filled {
            let code = self.next_code();
            dst.push_bits(code, part);
            self.pending = code >> part;
            self.pending_len = self.n - part;
            done += part;
        }
        Ok(done)
    }
}

fn read_some<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<usize> {
    let mut total = 0;
    while total < buf.len() {
        match r.read(&mut buf[total..]) {
            Ok(0) => break,
            Ok(n) => total += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::io_at(offset + total as u64, e)),
        }
    }
    Ok(total)
}

/// Packs a bit stream into LSB-first bytes on a writer.
pub struct BitWriter<W: Write> {
    inner: W,
    acc: u64,
    acc_bits: usize,
    buf: Vec<u8>,
    bits_written: u64,
}

impl<W: Write> BitWriter<W> {
    pub fn new(inner: W) -> Self {
        BitWriter {
            inner,
            acc: 0,
            acc_bits: 0,
            buf: Vec::with_capacity(READ_BUF),
            bits_written: 0,
        }
    }

    pub fn bits_written(&self) -> u64 {
        self.bits_written
    }

    pub fn write_block(&mut self, block: &BitBlock) -> Result<()> {
        let full = block.len() / 64;
        for &w in &block.words()[..full] {
            self.push(w, 64);
        }
        let rest = block.len() % 64;
        if rest > 0 {
            self.push(block.words()[full], rest);
        }
        self.bits_written += block.len() as u64;
        if self.buf.len() >= READ_BUF {
            self.flush_buf()?;
        }
        Ok(())
    }

    #[inline]
    fn push(&mut self, value: u64, count: usize) {
        // acc holds fewer than 8 bits between calls
        let value = value & low_mask(count);
        let total = self.acc_bits + count;
        let lo = self.acc | (value << self.acc_bits);
        let hi = if self.acc_bits == 0 { 0 } else { value >> (64 - self.acc_bits) };
        let whole = total / 8;
        let bytes_lo = whole.min(8);
        self.buf.extend_from_slice(&lo.to_le_bytes()[..bytes_lo]);
        if whole > 8 {
            self.buf.extend_from_slice(&hi.to_le_bytes()[..whole - 8]);
        }
        self.acc_bits = total % 8;
        self.acc = if self.acc_bits == 0 {
            0
        } else if whole >= 8 {
            (hi >> (8 * (whole - 8))) & low_mask(self.acc_bits)
        } else {
            (lo >> (8 * whole)) & low_mask(self.acc_bits)
        };
    }

    fn flush_buf(&mut self) -> Result<()> {
        self.inner
            .write_all(&self.buf)
            .map_err(|e| Error::io_at(self.bits_written / 8, e))?;
        self.buf.clear();
        Ok(())
    }

    /// Writes any buffered bytes, zero-padding a trailing partial byte, and
    /// returns the underlying writer.
    pub fn finish(mut self) -> Result<W> {
        if self.acc_bits > 0 {
            self.buf.push(self.acc as u8);
            self.acc = 0;
            self.acc_bits = 0;
        }
        self.flush_buf()?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}
