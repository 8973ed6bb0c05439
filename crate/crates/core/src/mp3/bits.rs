//! MSB-first bit reader over a byte slice.

use super::Mp3Error;

/// Reads bits most-significant-first, tracking the absolute bit position.
/// All reads are bounds-checked; running off the end is a hard error, never
/// a silent zero fill.
#[derive(Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    /// Bits consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() * 8 - self.pos
    }

    /// Read `n` bits (n <= 32) as an unsigned integer.
    pub fn read(&mut self, n: u32) -> Result<u32, Mp3Error> {
        debug_assert!(n <= 32);
        if self.remaining() < n as usize {
            return Err(Mp3Error::BitUnderflow);
        }
        let mut out: u32 = 0;
        for _ in 0..n {
            let byte = self.data[self.pos >> 3];
            let bit = (byte >> (7 - (self.pos & 7))) & 1;
            out = (out << 1) | u32::from(bit);
            self.pos += 1;
        }
        Ok(out)
    }

    pub fn read_bit(&mut self) -> Result<bool, Mp3Error> {
        Ok(self.read(1)? == 1)
    }

    /// Skip forward without interpreting the bits.
    pub fn skip(&mut self, n: usize) -> Result<(), Mp3Error> {
        if self.remaining() < n {
            return Err(Mp3Error::BitUnderflow);
        }
        self.pos += n;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_msb_first() {
        let mut r = BitReader::new(&[0b1011_0001, 0b1000_0000]);
        assert_eq!(r.read(1).unwrap(), 1);
        assert_eq!(r.read(3).unwrap(), 0b011);
        assert_eq!(r.read(5).unwrap(), 0b0001_1);
        assert_eq!(r.position(), 9);
    }

    #[test]
    fn underflow_is_an_error() {
        let mut r = BitReader::new(&[0xFF]);
        assert_eq!(r.read(8).unwrap(), 0xFF);
        assert!(matches!(r.read(1), Err(Mp3Error::BitUnderflow)));
    }

    #[test]
    fn crossing_byte_boundaries() {
        let mut r = BitReader::new(&[0x12, 0x34, 0x56]);
        assert_eq!(r.read(12).unwrap(), 0x123);
        assert_eq!(r.read(12).unwrap(), 0x456);
    }
}
