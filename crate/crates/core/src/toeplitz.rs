//! Toeplitz seeds and the reference GF(2) matrix-vector product.
//!
//! A `j x k` binary Toeplitz matrix is fixed by `j + k - 1` seed bits. The
//! entry at row `r`, column `c` is `bits[j - 1 - r + c]`, so column `c` is the
//! seed window `bits[c ..= c + j - 1]` read from the top row downwards in
//! reverse, and stepping one column to the right slides that window by one.
//!
//! [`multiply_naive`] is deliberately the slow per-entry definition; it is the
//! oracle the streaming extractor is checked against.

use std::io::{Read, Write};

use crate::bits::BitBlock;
use crate::error::{Error, Result};

/// Magic bytes opening a seed file.
pub const SEED_MAGIC: &[u8; 4] = b"TPSD";

#[derive(Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    bits: BitBlock,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for ToeplitzSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToeplitzSeed")
            .field("j", &self.rows)
            .field("k", &self.cols)
            .field("bits", &self.bits)
            .finish()
    }
}

fn check_shape(j: usize, k: usize) -> Result<()> {
    if j == 0 || k == 0 {
        return Err(Error::contract(format!("matrix shape {j}x{k} must be at least 1x1")));
    }
    Ok(())
}

impl ToeplitzSeed {
    /// Wraps `j + k - 1` seed bits as a `j x k` matrix description.
    pub fn new(j: usize, k: usize, bits: BitBlock) -> Result<Self> {
        check_shape(j, k)?;
        if bits.len() != j + k - 1 {
            return Err(Error::contract(format!(
                "a {j}x{k} seed needs {} bits, got {}",
                j + k - 1,
                bits.len()
            )));
        }
        Ok(ToeplitzSeed {
            bits,
            rows: j,
            cols: k,
        })
    }

    /// Output length (row count).
    pub fn j(&self) -> usize {
        self.rows
    }

    /// Input length (column count).
    pub fn k(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &BitBlock {
        &self.bits
    }

    /// Number of bytes a seed of this shape occupies when packed.
    pub fn packed_len(j: usize, k: usize) -> usize {
        (j + k - 1).div_ceil(8)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SEED_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&self.bits.to_bytes_lsb())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header).map_err(|e| Error::Format {
            what: "seed file",
            detail: format!("short header: {e}"),
        })?;
        if &header[..4] != SEED_MAGIC {
            return Err(Error::Format {
                what: "seed file",
                detail: "missing TPSD magic".into(),
            });
        }
        let j = u64::from_le_bytes(header[4..12].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        check_shape(j, k)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let need = Self::packed_len(j, k);
        if body.len() != need {
            return Err(Error::Format {
                what: "seed file",
                detail: format!("{j}x{k} seed needs {need} payload bytes, found {}", body.len()),
            });
        }
        Self::new(j, k, BitBlock::from_bytes_lsb(&body, j + k - 1)?)
    }
}

/// Matrix entry at row `r`, column `c`.
pub fn matrix_entry(seed: &ToeplitzSeed, r: usize, c: usize) -> Result<bool> {
    if r >= seed.rows || c >= seed.cols {
        return Err(Error::contract(format!(
            "entry ({r}, {c}) outside {}x{} matrix",
            seed.rows, seed.cols
        )));
    }
    Ok(seed.bits.get(seed.rows - 1 - r + c))
}

/// Reference product `T · data` over GF(2), evaluated entry by entry.
pub fn multiply_naive(seed: &ToeplitzSeed, data: &BitBlock) -> Result<BitBlock> {
    if data.len() != seed.cols {
        return Err(Error::contract(format!(
            "input block has {} bits, matrix has {} columns",
            data.len(),
            seed.cols
        )));
    }
    let mut out = BitBlock::zeros(seed.rows);
    for r in 0..seed.rows {
        let mut acc = false;
        for c in 0..seed.cols {
            acc ^= seed.bits.get(seed.rows - 1 - r + c) & data.get(c);
        }
        out.set(r, acc);
    }
    Ok(out)
}

/// Collision probability `k · 2^(1-j)` of the Toeplitz family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionProbability {
    pub log2: f64,
}

impl CollisionProbability {
    /// Linear value; underflows to zero for large `j`.
    pub fn value(&self) -> f64 {
        self.log2.exp2()
    }
}

pub fn collision_probability(j: usize, k: usize) -> Result<CollisionProbability> {
    if j == 0 || k == 0 {
        return Err(Error::contract("collision probability needs j, k >= 1"));
    }
    Ok(CollisionProbability {
        log2: (k as f64).log2() - (j as f64 - 1.0),
    })
}

/// Unpacks exactly `j + k - 1` bits (LSB-first) from a byte source; surplus
/// bits of the last byte are dropped.
pub fn generate_seed<R: Read>(j: usize, k: usize, mut entropy: R) -> Result<ToeplitzSeed> {
    check_shape(j, k)?;
    let needed = ToeplitzSeed::packed_len(j, k);
    let mut buf = vec![0u8; needed];
    let mut got = 0;
    while got < needed {
        match entropy.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if got < needed {
        return Err(Error::InsufficientEntropy {
            needed,
            available: got,
        });
    }
    ToeplitzSeed::new(j, k, BitBlock::from_bytes_lsb(&buf, j + k - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut impl Rng, len: usize) -> BitBlock {
        (0..len).map(|_| rng.random::<bool>()).collect()
    }

    fn random_seed(rng: &mut impl Rng, j: usize, k: usize) -> ToeplitzSeed {
        ToeplitzSeed::new(j, k, random_block(rng, j + k - 1)).unwrap()
    }

    #[test]
    fn constant_seed_gives_constant_matrix() {
        let seed = ToeplitzSeed::new(3, 5, BitBlock::from_bits(&[1; 7])).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                assert!(matrix_entry(&seed, r, c).unwrap());
            }
        }
    }

    #[test]
    fn two_by_two_layout() {
        // one-hot seeds make each entry identify the seed bit it reads
        for pattern in [[1u8, 0, 0], [0, 1, 0], [0, 0, 1]] {
            let seed = ToeplitzSeed::new(2, 2, BitBlock::from_bits(&pattern)).unwrap();
            let b = |i: usize| pattern[i] == 1;
            assert_eq!(matrix_entry(&seed, 0, 0).unwrap(), b(1));
            assert_eq!(matrix_entry(&seed, 1, 0).unwrap(), b(0));
            assert_eq!(matrix_entry(&seed, 0, 1).unwrap(), b(2));
            assert_eq!(matrix_entry(&seed, 1, 1).unwrap(), b(1));
        }
    }

    #[test]
    fn out_of_range_entry_is_rejected() {
        let seed = ToeplitzSeed::new(2, 3, BitBlock::zeros(4)).unwrap();
        assert!(matches!(matrix_entry(&seed, 2, 0), Err(Error::Contract(_))));
        assert!(matches!(matrix_entry(&seed, 0, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_validation() {
        assert!(ToeplitzSeed::new(4, 4, BitBlock::zeros(7)).is_ok());
        assert!(ToeplitzSeed::new(0, 4, BitBlock::zeros(3)).is_err());
        assert!(ToeplitzSeed::new(2, 4, BitBlock::zeros(4)).is_err());
    }

    #[test]
    fn matches_diagonal_first_construction() {
        // Build the matrix by walking each descending diagonal: the diagonal
        // starting at (j-1-d, 0) for d < j, or (0, d-j+1) otherwise, carries
        // seed bit d.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (j, k) = (8, 16);
        let seed = random_seed(&mut rng, j, k);
        let mut m = vec![vec![false; k]; j];
        for d in 0..j + k - 1 {
            let (mut r, mut c) = if d < j { (j - 1 - d, 0) } else { (0, d - j + 1) };
            while r < j && c < k {
                m[r][c] = seed.bits().get(d);
                r += 1;
                c += 1;
            }
        }
        for r in 0..j {
            for c in 0..k {
                assert_eq!(matrix_entry(&seed, r, c).unwrap(), m[r][c], "({r},{c})");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seed = random_seed(&mut rng, 5, 9);
        assert_eq!(multiply_naive(&seed, &BitBlock::zeros(9)).unwrap(), BitBlock::zeros(5));
    }

    #[test]
    fn one_hot_selects_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (j, k) = (5, 9);
        let seed = random_seed(&mut rng, j, k);
        for c in 0..k {
            let mut data = BitBlock::zeros(k);
            data.set(c, true);
            let out = multiply_naive(&seed, &data).unwrap();
            for r in 0..j {
                assert_eq!(out.get(r), seed.bits().get(j - 1 - r + c));
            }
        }
    }

    #[test]
    fn six_by_twelve_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(612);
        let seed = random_seed(&mut rng, 6, 12);
        let data = random_block(&mut rng, 12);
        let mut expect = BitBlock::zeros(6);
        for r in 0..6 {
            let dot: u32 = (0..12)
                .map(|c| (matrix_entry(&seed, r, c).unwrap() as u32) * (data.get(c) as u32))
                .sum();
            expect.set(r, dot % 2 == 1);
        }
        assert_eq!(multiply_naive(&seed, &data).unwrap(), expect);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let seed = ToeplitzSeed::new(2, 4, BitBlock::zeros(5)).unwrap();
        assert!(matches!(multiply_naive(&seed, &BitBlock::zeros(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn column_decomposition_exhaustive_small() {
        // every seed and input for j ≤ 4, k ≤ 6 would be 2^(j+k-1+k); cover all
        // inputs for a handful of seeds per shape instead
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for j in 1..=4 {
            for k in (j + 1)..=6 {
                for _ in 0..8 {
                    let seed = random_seed(&mut rng, j, k);
                    for x in 0u32..(1 << k) {
                        let data: BitBlock = (0..k).map(|c| (x >> c) & 1 == 1).collect();
                        let mut by_columns = BitBlock::zeros(j);
                        for c in (0..k).filter(|&c| data.get(c)) {
                            let col: BitBlock =
                                (0..j).map(|r| matrix_entry(&seed, r, c).unwrap()).collect();
                            by_columns = by_columns.xor(&col).unwrap();
                        }
                        assert_eq!(multiply_naive(&seed, &data).unwrap(), by_columns);
                    }
                }
            }
        }
    }

    #[test]
    fn collision_probability_values() {
        assert_eq!(collision_probability(1, 1).unwrap().value(), 1.0);
        assert_eq!(collision_probability(11, 1024).unwrap().value(), 1.0);
        let p = collision_probability(6144, 12288).unwrap();
        assert!((12288f64.log2() - 13.585).abs() < 1e-3);
        assert!((p.log2 - (12288f64.log2() - 6143.0)).abs() < 1e-9);
        assert!((p.log2 + 6129.4).abs() < 0.05);
        assert_eq!(p.value(), 0.0);
    }

    #[test]
    fn seed_unpacking() {
        let seed = generate_seed(2, 2, &[0b0000_0101u8][..]).unwrap();
        assert_eq!(seed.bits().iter().collect::<Vec<_>>(), [true, false, true]);
        let again = generate_seed(2, 2, &[0b0000_0101u8][..]).unwrap();
        assert_eq!(seed, again);
    }

    #[test]
    fn full_scale_seed_consumes_2304_bytes() {
        assert_eq!(ToeplitzSeed::packed_len(6144, 12288), 2304);
        let bytes = vec![0xA5u8; 4000];
        let mut src = &bytes[..];
        generate_seed(6144, 12288, &mut src).unwrap();
        assert_eq!(src.len(), 4000 - 2304);
    }

    #[test]
    fn exhausted_source() {
        match generate_seed(6144, 12288, &[0u8; 100][..]) {
            Err(Error::InsufficientEntropy { needed, available }) => {
                assert_eq!((needed, available), (2304, 100));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_file_roundtrip_and_layout() {
        let seed = generate_seed(3, 7, &[0xFFu8, 0x01][..]).unwrap();
        let mut buf = Vec::new();
        seed.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TPSD");
        assert_eq!(&buf[4..12], &3u64.to_le_bytes());
        assert_eq!(&buf[12..20], &7u64.to_le_bytes());
        assert_eq!(&buf[20..], &[0xFF, 0x01]);
        assert_eq!(ToeplitzSeed::read_from(&buf[..]).unwrap(), seed);

        buf[0] = b'X';
        assert!(matches!(ToeplitzSeed::read_from(&buf[..]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn diagonals_are_constant(j in 1usize..20, extra in 1usize..20, s in any::<u64>()) {
            let k = j + extra;
            let seed = random_seed(&mut ChaCha8Rng::seed_from_u64(s), j, k);
            for r in 0..j - 1 {
                for c in 0..k - 1 {
                    prop_assert_eq!(matrix_entry(&seed, r, c).unwrap(), matrix_entry(&seed, r + 1, c + 1).unwrap());
                }
            }
        }

        #[test]
        fn product_is_linear(j in 1usize..40, extra in 1usize..60, s in any::<u64>()) {
            let k = j + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let seed = random_seed(&mut rng, j, k);
            let a = random_block(&mut rng, k);
            let b = random_block(&mut rng, k);
            let lhs = multiply_naive(&seed, &a.xor(&b).unwrap()).unwrap();
            let rhs = multiply_naive(&seed, &a).unwrap().xor(&multiply_naive(&seed, &b).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
