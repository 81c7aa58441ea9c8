//! Little-endian helpers shared by the checkpoint and dataset formats.

use headpurify_core::Tensor;

pub(crate) type Res<T> = std::result::Result<T, String>;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Magic, version and a length-prefixed JSON header.
pub(crate) fn put_preamble(out: &mut Vec<u8>, magic: &[u8; 4], version: u32, header: &[u8]) {
    out.extend_from_slice(magic);
    put_u32(out, version);
    put_u32(out, header.len() as u32);
    out.extend_from_slice(header);
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Res<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Res<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Res<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Res<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn str(&mut self) -> Res<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| e.to_string())
    }

    /// Checks magic and version, returns the header bytes.
    pub(crate) fn preamble(&mut self, magic: &[u8; 4], version: u32, what: &str) -> Res<&'a [u8]> {
        if self.take(4)? != magic {
            return Err(format!("not a {what} (bad magic)"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(format!("unsupported {what} version {v}"));
        }
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn f64s(&mut self, shape: &[usize]) -> Res<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("shape overflows")?;
        let bytes = self.take(n.checked_mul(8).ok_or("shape overflows")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    /// A rank-prefixed shape followed by its values.
    pub(crate) fn tensor(&mut self) -> Res<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Res<Vec<_>>>()?;
        self.f64s(&shape)
    }

    pub(crate) fn finish(&self) -> Res<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(format!("{n} trailing bytes")),
        }
    }
}
