//! Binary checkpoint format.
//!
//! ```text
//! "FORECKPT"            8 bytes
//! version               u32 = 1
//! tensor count          u32
//! per tensor:
//!   name length         u16
//!   name                UTF-8
//!   dtype               u8 (0 = f32)
//!   ndim                u8
//!   dims                u32 × ndim
//!   payload             f32 × prod(dims)
//! step                  u64
//! rng state             32 bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Network, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FORECKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Name prefix under which a teacher is stored next to its student.
pub const TEACHER_PREFIX: &str = "teacher.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub rng_state: [u8; 32],
}

impl Checkpoint {
    pub fn from_network(net: &Network, step: u64, rng_state: [u8; 32]) -> Self {
        Checkpoint {
            tensors: net.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            step,
            rng_state,
        }
    }

    /// Student tensors under their own names plus teacher tensors under [`TEACHER_PREFIX`].
    pub fn from_pair(student: &Network, teacher: &Network, step: u64, rng_state: [u8; 32]) -> Self {
        let mut ck = Self::from_network(student, step, rng_state);
        ck.tensors.extend(
            teacher
                .named()
                .map(|(n, t)| (format!("{TEACHER_PREFIX}{n}"), t.clone())),
        );
        ck
    }

    pub fn has_teacher(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(TEACHER_PREFIX))
    }

    /// The student network (all tensors without the teacher prefix).
    pub fn student(&self) -> Result<Network> {
        let own = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(TEACHER_PREFIX))
            .cloned()
            .collect();
        Network::from_named(own, Role::Student)
    }

    pub fn teacher(&self) -> Result<Network> {
        let t: Vec<_> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(TEACHER_PREFIX)
                    .map(|s| (s.to_string(), t.clone()))
            })
            .collect();
        if t.is_empty() {
            return Err(Error::TensorTable("checkpoint has no teacher".into()));
        }
        Network::from_named(t, Role::Teacher)
    }

    /// The network used for evaluation: the teacher when present, else the student.
    pub fn eval_network(&self) -> Result<Network> {
        if self.has_teacher() {
            self.teacher()
        } else {
            self.student()
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(self.tensors.len()).expect("tensor count").to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::TensorTable(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[DTYPE_F32, t.ndim() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng_state)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::TensorTable("tensor name is not UTF-8".into()))?;
            let mut hdr = [0u8; 2];
            read_exact(&mut r, &mut hdr)?;
            if hdr[0] != DTYPE_F32 {
                return Err(Error::TensorTable(format!("`{name}`: unknown dtype {}", hdr[0])));
            }
            let dims = (0..hdr[1])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            if dims.is_empty() || len == 0 || len > (1 << 28) {
                return Err(Error::TensorTable(format!("`{name}`: bad dims {dims:?}")));
            }
            let mut bytes = vec![0u8; len * 4];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let mut step = [0u8; 8];
        read_exact(&mut r, &mut step)?;
        let mut rng_state = [0u8; 32];
        read_exact(&mut r, &mut rng_state)?;
        Ok(Checkpoint {
            tensors,
            step: u64::from_le_bytes(step),
            rng_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(Error::file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::file(path))?;
        Self::read_from(&bytes[..])
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_network(net, 0, [0; 32]).save(path)
}

/// Loads the student stored in a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    Checkpoint::load(path)?.student()
}
