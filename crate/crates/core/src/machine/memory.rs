use std::collections::BTreeMap;

use super::instr::Size;

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse little-endian byte memory over the full 32-bit space.
///
/// Unmapped reads return zero; writes allocate the containing page.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    pages: BTreeMap<u32, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_u8(&self, addr: u32) -> u8 {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map_or(0, |p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    pub fn write_u8(&mut self, addr: u32, value: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = value;
    }

    pub fn read(&self, addr: u32, size: Size) -> u32 {
        (0..size.bytes()).fold(0, |acc, i| acc | (self.read_u8(addr.wrapping_add(i)) as u32) << (8 * i))
    }

    pub fn write(&mut self, addr: u32, size: Size, value: u32) {
        for i in 0..size.bytes() {
            self.write_u8(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }

    pub fn read_u32(&self, addr: u32) -> u32 {
        self.read(addr, Size::Word)
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) {
        self.write(addr, Size::Word, value)
    }

    /// Addresses of every allocated byte whose value differs between the two
    /// memories, skipping addresses for which `ignore` returns true.
    pub fn diff(&self, other: &Memory, ignore: impl Fn(u32) -> bool) -> Vec<u32> {
        let mut keys: Vec<u32> = self.pages.keys().chain(other.pages.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let mut out = Vec::new();
        for page in keys {
            let base = page << PAGE_BITS;
            for off in 0..PAGE_SIZE as u32 {
                let a = base + off;
                if self.read_u8(a) != other.read_u8(a) && !ignore(a) {
                    out.push(a);
                }
            }
        }
        out
    }
}
