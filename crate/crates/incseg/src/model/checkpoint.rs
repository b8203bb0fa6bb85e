//! Binary model container: magic "MDIL", little-endian u32 version, a
//! text metadata block describing the architecture and domains, then one
//! record per tensor (parameters and BN running statistics). Loading
//! rebuilds the skeleton from the metadata and requires every tensor to
//! be present with its exact shape; frozen flags are not persisted.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DomainInfo, HeadMode, InitWt, Model, ModelConfig, NetKind};
use crate::tensor::rng::RngState;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"MDIL";
pub const VERSION: u32 = 1;

/// Dtype byte stored in each record: 0 = f32, 1 = f64, 2 = u8 labels.
pub const DTYPE_LABELS: u8 = 2;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn scalars_to_bytes<S: Scalar>(vals: &[S]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * S::BYTE_WIDTH);
    for &v in vals {
        out.extend_from_slice(&v.to_le_bytes_vec());
    }
    out
}

pub(crate) fn scalars_from_bytes<S: Scalar>(bytes: &[u8]) -> Vec<S> {
    bytes.chunks_exact(S::BYTE_WIDTH).map(S::from_le_bytes_slice).collect()
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| fmt_err("truncated container"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| fmt_err(format!("truncated while reading {what}")))?;
    Ok(buf)
}

/// One tensor record: name, dtype byte, extents, raw little-endian payload.
pub(crate) fn write_record(
    w: &mut impl Write,
    name: &str,
    dtype: u8,
    extents: &[usize],
    payload: &[u8],
) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype, extents.len() as u8])?;
    for &e in extents {
        write_u32(w, e as u32)?;
    }
    w.write_all(payload)?;
    Ok(())
}

pub(crate) struct Record {
    pub name: String,
    pub dtype: u8,
    pub extents: Vec<usize>,
    pub payload: Vec<u8>,
}

pub(crate) fn read_record(r: &mut impl Read) -> Result<Record> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(fmt_err(format!("implausible record name length {name_len}")));
    }
    let name = String::from_utf8(read_exact(r, name_len, "record name")?)
        .map_err(|_| fmt_err("record name is not UTF-8"))?;
    let head = read_exact(r, 2, "record header")?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let width = match dtype {
        0 => 4,
        1 => 8,
        DTYPE_LABELS => 1,
        other => return Err(fmt_err(format!("unknown dtype code {other} in record `{name}`"))),
    };
    let mut extents = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let e = read_u32(r)? as usize;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| fmt_err(format!("record `{name}` extent overflow")))?;
        extents.push(e);
    }
    let payload = read_exact(r, numel * width, &format!("payload of `{name}`"))?;
    Ok(Record { name, dtype, extents, payload })
}

fn meta_text<S: Scalar>(model: &Model<S>) -> String {
    let cfg = model.config();
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    s.push_str(&format!("dtype={}\n", if S::DTYPE_CODE == 0 { "f32" } else { "f64" }));
    s.push_str(&format!("net={}\n", match cfg.net {
        NetKind::Dau => "dau",
        NetKind::Plain => "plain",
    }));
    s.push_str(&format!("head={}\n", match cfg.head {
        HeadMode::PerDomain => "per_domain",
        HeadMode::SingleHead => "single_head",
    }));
    s.push_str(&format!("in_channels={}\n", cfg.in_channels));
    s.push_str(&format!("widths={}\n", join(&cfg.widths)));
    s.push_str(&format!("stage_strides={}\n", join(&cfg.stage_strides)));
    s.push_str(&format!("units_per_stage={}\n", cfg.units_per_stage));
    s.push_str(&format!("decoder_widths={}\n", join(&cfg.decoder_widths)));
    s.push_str(&format!("decoder_kernel={}\n", cfg.decoder_kernel));
    s.push_str(&format!("adapter_init_std={}\n", cfg.adapter_init_std));
    s.push_str(&format!("bn_momentum={}\n", cfg.bn_momentum));
    s.push_str(&format!("bn_eps={}\n", cfg.bn_eps));
    s.push_str(&format!("domain_count={}\n", model.domain_count()));
    for (t, d) in model.domains().iter().enumerate() {
        s.push_str(&format!("domain{t}.name={}\n", d.name));
        s.push_str(&format!("domain{t}.classes={}\n", d.class_names.join(",")));
    }
    s
}

struct Meta {
    map: HashMap<String, String>,
}

impl Meta {
    fn parse(text: &str) -> Result<Meta> {
        let mut map = HashMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("metadata line `{line}` is not key=value")))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(fmt_err(format!("duplicate metadata key `{k}`")));
            }
        }
        Ok(Meta { map })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| fmt_err(format!("metadata key `{key}` missing")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("metadata key `{key}` is not an integer")))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("metadata key `{key}` is not a number")))
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split(',')
            .map(|s| s.parse().map_err(|_| fmt_err(format!("metadata key `{key}` holds a non-integer"))))
            .collect()
    }
}

/// Serialize the model (parameters and running statistics) to a writer.
pub fn save<S: Scalar>(model: &Model<S>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    let meta = meta_text(model);
    write_u32(w, meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;

    let mut count = 0u32;
    model.visit_params(&mut |_| count += 1);
    model.visit_bns(&mut |_| count += 2);
    write_u32(w, count)?;

    let mut result = Ok(());
    model.visit_params(&mut |p| {
        if result.is_ok() {
            let t = p.tensor();
            let bytes = scalars_to_bytes(&t.to_vec());
            result = write_record(w, p.name(), S::DTYPE_CODE, &t.shape(), &bytes);
        }
    });
    model.visit_bns(&mut |bn| {
        if result.is_ok() {
            let prefix = bn
                .scale
                .name()
                .strip_suffix(".scale")
                .expect("bn scale names end in .scale")
                .to_string();
            let stats = bn.stats.borrow();
            let c = stats.mean.len();
            result = write_record(
                w,
                &format!("{prefix}.running_mean"),
                S::DTYPE_CODE,
                &[c],
                &scalars_to_bytes(&stats.mean),
            )
            .and_then(|_| {
                write_record(
                    w,
                    &format!("{prefix}.running_var"),
                    S::DTYPE_CODE,
                    &[c],
                    &scalars_to_bytes(&stats.var),
                )
            });
        }
    });
    result
}

pub fn save_to_path<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut file = std::io::BufWriter::new(file);
    save(model, &mut file)?;
    file.flush()?;
    Ok(())
}

fn rebuild_skeleton<S: Scalar>(meta: &Meta) -> Result<Model<S>> {
    let dtype = meta.get("dtype")?;
    let expected = if S::DTYPE_CODE == 0 { "f32" } else { "f64" };
    if dtype != expected {
        return Err(fmt_err(format!("container holds {dtype} tensors, expected {expected}")));
    }
    let net = match meta.get("net")? {
        "dau" => NetKind::Dau,
        "plain" => NetKind::Plain,
        other => return Err(fmt_err(format!("unknown net kind `{other}`"))),
    };
    let head = match meta.get("head")? {
        "per_domain" => HeadMode::PerDomain,
        "single_head" => HeadMode::SingleHead,
        other => return Err(fmt_err(format!("unknown head mode `{other}`"))),
    };
    let dw = meta.usize_list("decoder_widths")?;
    if dw.len() != 2 {
        return Err(fmt_err("decoder_widths must list exactly two widths"));
    }
    let cfg = ModelConfig {
        in_channels: meta.usize("in_channels")?,
        widths: meta.usize_list("widths")?,
        stage_strides: meta.usize_list("stage_strides")?,
        units_per_stage: meta.usize("units_per_stage")?,
        decoder_widths: [dw[0], dw[1]],
        decoder_kernel: meta.usize("decoder_kernel")?,
        adapter_init_std: meta.f64("adapter_init_std")?,
        bn_momentum: meta.f64("bn_momentum")?,
        bn_eps: meta.f64("bn_eps")?,
        net,
        head,
    };
    let count = meta.usize("domain_count")?;
    if count == 0 {
        return Err(fmt_err("container lists zero domains"));
    }
    let domain = |t: usize| -> Result<DomainInfo> {
        DomainInfo::new(
            meta.get(&format!("domain{t}.name"))?,
            meta.get(&format!("domain{t}.classes"))?.split(',').map(|s| s.to_string()).collect(),
        )
    };
    // Tensor contents are irrelevant here; every record overwrites them.
    let mut rng = RngState::new(0);
    let mut model = Model::build(cfg, domain(0)?, &mut rng)?;
    for t in 1..count {
        model.add_domain(domain(t)?, InitWt::Random, &mut rng)?;
    }
    Ok(model)
}

/// Deserialize a model saved by [`save`].
pub fn load<S: Scalar>(r: &mut impl Read) -> Result<Model<S>> {
    let magic = read_exact(r, 4, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err("not a model container (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported container version {version}")));
    }
    let meta_len = read_u32(r)? as usize;
    let meta_text = String::from_utf8(read_exact(r, meta_len, "metadata")?)
        .map_err(|_| fmt_err("metadata is not UTF-8"))?;
    let meta = Meta::parse(&meta_text)?;
    let model = rebuild_skeleton::<S>(&meta)?;

    let count = read_u32(r)? as usize;
    let mut records: HashMap<String, Record> = HashMap::with_capacity(count);
    for _ in 0..count {
        let rec = read_record(r)?;
        if records.insert(rec.name.clone(), rec).is_some() {
            return Err(fmt_err("duplicate tensor record"));
        }
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<S>> {
        let rec = records
            .remove(name)
            .ok_or_else(|| fmt_err(format!("tensor `{name}` missing from container")))?;
        if rec.dtype != S::DTYPE_CODE {
            return Err(fmt_err(format!("tensor `{name}` has wrong dtype")));
        }
        if rec.extents != shape {
            return Err(fmt_err(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                rec.extents
            )));
        }
        Ok(scalars_from_bytes(&rec.payload))
    };

    let mut result = Ok(());
    model.visit_params(&mut |p| {
        if result.is_ok() {
            match take(p.name(), &p.tensor().shape()) {
                Ok(data) => p.tensor().set_data(&data),
                Err(e) => result = Err(e),
            }
        }
    });
    model.visit_bns(&mut |bn| {
        if result.is_ok() {
            let prefix = bn.scale.name().strip_suffix(".scale").expect("bn naming").to_string();
            let c = bn.stats.borrow().mean.len();
            let got = take(&format!("{prefix}.running_mean"), &[c])
                .and_then(|m| take(&format!("{prefix}.running_var"), &[c]).map(|v| (m, v)));
            match got {
                Ok((mean, var)) => {
                    let mut stats = bn.stats.borrow_mut();
                    stats.mean = mean;
                    stats.var = var;
                }
                Err(e) => result = Err(e),
            }
        }
    });
    result?;
    if let Some(name) = records.keys().next() {
        return Err(fmt_err(format!("container holds unknown tensor `{name}`")));
    }
    Ok(model)
}

pub fn load_from_path<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    load(&mut std::io::BufReader::new(file))
}
