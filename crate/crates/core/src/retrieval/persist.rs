//! Index file: magic `REATIDX1`, then little-endian sections.
//!
//! ```text
//! u64 vocab_size
//! u64 doc_count
//! doc_count x { u64 doc_id, u32 len, u32 ids[len], u32 n_resp, n_resp x { u32 len, u32 ids[len] } }
//! u64 term_count
//! term_count x { u32 term, u32 n, n x { u32 doc_id, u32 tf } }
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Document, Index};
use crate::corpus::Utterance;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"REATIDX1";

fn write_ids<W: Write>(w: &mut W, ids: &[usize]) -> Result<()> {
    w.write_u32::<LittleEndian>(ids.len() as u32)?;
    for &id in ids {
        w.write_u32::<LittleEndian>(id as u32)?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n)
        .map(|_| Ok(r.read_u32::<LittleEndian>()? as usize))
        .collect()
}

pub(super) fn write_index<W: Write>(index: &Index, w: &mut W) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_u64::<LittleEndian>(index.vocab_size as u64)?;
    w.write_u64::<LittleEndian>(index.docs.len() as u64)?;
    for doc in &index.docs {
        w.write_u64::<LittleEndian>(doc.doc_id as u64)?;
        write_ids(w, doc.message.ids())?;
        w.write_u32::<LittleEndian>(doc.responses.len() as u32)?;
        for resp in &doc.responses {
            write_ids(w, resp.ids())?;
        }
    }
    w.write_u64::<LittleEndian>(index.postings.len() as u64)?;
    for (term, list) in &index.postings {
        w.write_u32::<LittleEndian>(*term as u32)?;
        w.write_u32::<LittleEndian>(list.len() as u32)?;
        for p in list {
            w.write_u32::<LittleEndian>(p.doc_id as u32)?;
            w.write_u32::<LittleEndian>(p.tf as u32)?;
        }
    }
    Ok(())
}

pub(super) fn read_index<R: Read>(r: &mut R, origin: &str) -> Result<Index> {
    let bad = |reason: &str| Error::format(origin, reason);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != INDEX_MAGIC {
        return Err(bad("bad magic"));
    }
    let vocab_size = r.read_u64::<LittleEndian>()? as usize;
    let doc_count = r.read_u64::<LittleEndian>()? as usize;
    let mut docs = Vec::with_capacity(doc_count);
    for _ in 0..doc_count {
        let doc_id = r.read_u64::<LittleEndian>()? as usize;
        let message = Utterance::new(read_ids(r)?).map_err(|_| bad("empty message"))?;
        let n_resp = r.read_u32::<LittleEndian>()? as usize;
        let responses = (0..n_resp)
            .map(|_| Utterance::new(read_ids(r)?).map_err(|_| bad("empty response")))
            .collect::<Result<Vec<_>>>()?;
        docs.push(Document {
            doc_id,
            message,
            responses,
        });
    }
    let term_count = r.read_u64::<LittleEndian>()? as usize;
    let mut stored = Vec::with_capacity(term_count);
    for _ in 0..term_count {
        let term = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let list = (0..n)
            .map(|_| {
                Ok((
                    r.read_u32::<LittleEndian>()? as usize,
                    r.read_u32::<LittleEndian>()? as usize,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        stored.push((term, list));
    }
    let index = Index::build(docs, vocab_size)?;
    let rebuilt: Vec<(usize, Vec<(usize, usize)>)> = index
        .postings
        .iter()
        .map(|(t, l)| (*t, l.iter().map(|p| (p.doc_id, p.tf)).collect()))
        .collect();
    if rebuilt != stored {
        return Err(bad("postings disagree with document table"));
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Pair;

    #[test]
    fn round_trip() {
        let u = |v: &[usize]| Utterance::new(v.to_vec()).unwrap();
        let pairs = vec![
            Pair { message: u(&[4, 5, 5]), response: u(&[6]) },
            Pair { message: u(&[4, 7]), response: u(&[8, 9]) },
            Pair { message: u(&[4, 5, 5]), response: u(&[10]) },
        ];
        let idx = Index::from_pairs(&pairs, 11).unwrap();
        let mut bytes = Vec::new();
        write_index(&idx, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"REATIDX1");
        let back = read_index(&mut bytes.as_slice(), "mem").unwrap();
        assert_eq!(back, idx);

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 1;
        assert!(read_index(&mut corrupt.as_slice(), "mem").is_err());
    }
}
