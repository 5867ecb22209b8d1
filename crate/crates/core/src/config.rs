//! TOML fleet configuration.
//!
//! ```toml
//! [fleet]
//! nodes = 4                 # generated as node-00 .. node-03
//! firmware = "heads"        # or "stock-uefi"
//! memory = 65536
//! vlan_range = [100, 199]
//! poll_interval = 1
//! base_image_size = 65536   # or base_image = "file:base.img"
//!
//! [[node]]                  # explicit nodes, in addition to generated ones
//! uuid = "old-uefi"
//! firmware = "stock-uefi"
//! stages = { uefi = "text:uefi image v0\n" }
//!
//! [[tamper]]                # delivered-tampered payload byte
//! node = "node-01"
//! stage = "boot-block"
//! position = 10
//! value = 0xff
//!
//! [[whitelist]]             # replaces the default entry of that name
//! name = "uefi-default"
//! firmware = "stock-uefi"
//! stages = { uefi = "text:uefi image v2\n" }
//! ```
//!
//! Payloads are `text:<utf8>`, `hex:<digits>` or `file:<path>` (relative
//! to the config file's directory).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::attestation::Whitelist;
use crate::node::{default_payload, FirmwareKind, Stage, DEFAULT_MEMORY_SIZE};
use crate::orchestrator::{
    default_base_image, runtime_policy, FleetSpec, NodeSpec, DEFAULT_BASE_IMAGE_SIZE,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn at(text: &str, offset: usize, message: impl Into<String>) -> Self {
        ConfigError {
            line: Some(line_of(text, offset)),
            message: message.into(),
        }
    }

    pub fn general(message: impl Into<String>) -> Self {
        ConfigError {
            line: None,
            message: message.into(),
        }
    }

    pub fn from_toml(text: &str, e: &toml::de::Error) -> Self {
        ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line containing byte `offset`.
pub fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|b| **b == b'\n')
        .count()
        + 1
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    #[serde(default)]
    pub nodes: usize,
    pub firmware: Option<Spanned<String>>,
    pub memory: Option<usize>,
    pub vlan_range: Option<Spanned<[u16; 2]>>,
    pub poll_interval: Option<u64>,
    pub base_image: Option<Spanned<String>>,
    pub base_image_size: Option<usize>,
    pub tenant_kernel: Option<Spanned<String>>,
    pub whitelist_file: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub uuid: Spanned<String>,
    pub firmware: Option<Spanned<String>>,
    pub memory: Option<usize>,
    #[serde(default)]
    pub stages: BTreeMap<String, Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperSection {
    pub node: Spanned<String>,
    pub stage: Spanned<String>,
    pub position: usize,
    pub value: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitelistSection {
    pub name: String,
    pub firmware: Spanned<String>,
    #[serde(default)]
    pub stages: BTreeMap<String, Spanned<String>>,
    /// Also emit `<name>+os` with the tenant kernel appended.
    #[serde(default = "yes")]
    pub with_kernel: bool,
}

fn yes() -> bool {
    true
}

/// The fleet-describing tables, shared by config and scenario files.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    #[serde(default)]
    pub fleet: FleetSection,
    #[serde(default)]
    pub node: Vec<NodeSection>,
    #[serde(default)]
    pub tamper: Vec<TamperSection>,
    #[serde(default)]
    pub whitelist: Vec<WhitelistSection>,
}

/// Parses a fleet config file. `base_dir` resolves `file:` payloads.
pub fn parse_fleet(text: &str, base_dir: Option<&Path>) -> Result<FleetSpec, ConfigError> {
    let cfg: FleetConfig = toml::from_str(text).map_err(|e| ConfigError::from_toml(text, &e))?;
    cfg.build(text, base_dir)
}

pub fn load_fleet(path: &Path) -> Result<FleetSpec, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::general(format!("{}: {e}", path.display())))?;
    parse_fleet(&text, path.parent())
}

struct Ctx<'a> {
    text: &'a str,
    base_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    fn err<T>(&self, s: &Spanned<T>, message: impl Into<String>) -> ConfigError {
        ConfigError::at(self.text, s.span().start, message)
    }

    fn firmware(&self, s: &Spanned<String>) -> Result<FirmwareKind, ConfigError> {
        s.get_ref().parse().map_err(|e| self.err(s, format!("{e}")))
    }

    fn payload(&self, s: &Spanned<String>) -> Result<Vec<u8>, ConfigError> {
        parse_payload(s.get_ref(), self.base_dir).map_err(|m| self.err(s, m))
    }

    fn stages(
        &self,
        kind: FirmwareKind,
        overrides: &BTreeMap<String, Spanned<String>>,
        context: &str,
    ) -> Result<Vec<Stage>, ConfigError> {
        let layout = kind.stage_layout();
        for (name, spec) in overrides {
            if !layout.iter().any(|(n, _, _)| n == name) {
                return Err(self.err(spec, format!("{context}: firmware {kind} has no stage {name:?}")));
            }
        }
        layout
            .iter()
            .map(|(name, pcr, origin)| {
                let payload = match overrides.get(*name) {
                    Some(spec) => self.payload(spec)?,
                    None => default_payload(name),
                };
                Stage::new(*name, payload, *pcr, *origin).map_err(|e| match overrides.get(*name) {
                    Some(spec) => self.err(spec, format!("{context}: {e}")),
                    None => ConfigError::general(format!("{context}: {e}")),
                })
            })
            .collect()
    }
}

/// Decodes a `text:`, `hex:` or `file:` payload.
pub fn parse_payload(spec: &str, base_dir: Option<&Path>) -> Result<Vec<u8>, String> {
    if let Some(t) = spec.strip_prefix("text:") {
        Ok(t.as_bytes().to_vec())
    } else if let Some(h) = spec.strip_prefix("hex:") {
        let clean: String = h.chars().filter(|c| !c.is_whitespace()).collect();
        hex::decode(clean).map_err(|e| format!("bad hex payload: {e}"))
    } else if let Some(f) = spec.strip_prefix("file:") {
        let path = match base_dir {
            Some(d) if Path::new(f).is_relative() => d.join(f),
            _ => PathBuf::from(f),
        };
        std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        Err(format!("payload {spec:?} must start with text:, hex: or file:"))
    }
}

impl FleetConfig {
    pub fn build(&self, text: &str, base_dir: Option<&Path>) -> Result<FleetSpec, ConfigError> {
        let cx = Ctx { text, base_dir };
        let f = &self.fleet;
        let firmware = match &f.firmware {
            Some(s) => cx.firmware(s)?,
            None => FirmwareKind::HeadsFlashed,
        };
        let memory = f.memory.unwrap_or(DEFAULT_MEMORY_SIZE);
        let mut nodes: Vec<NodeSpec> = (0..f.nodes)
            .map(|i| {
                let mut n = NodeSpec::pristine(format!("node-{i:02}"), firmware);
                n.memory = memory;
                n
            })
            .collect();
        for n in &self.node {
            let uuid = n.uuid.get_ref();
            if uuid.is_empty() || uuid.chars().any(char::is_whitespace) {
                return Err(cx.err(&n.uuid, format!("invalid node uuid {uuid:?}")));
            }
            if nodes.iter().any(|x| x.uuid == *uuid) {
                return Err(cx.err(&n.uuid, format!("duplicate node uuid {uuid}")));
            }
            let kind = match &n.firmware {
                Some(s) => cx.firmware(s)?,
                None => firmware,
            };
            nodes.push(NodeSpec {
                uuid: uuid.clone(),
                firmware: kind,
                stages: cx.stages(kind, &n.stages, &format!("node {uuid}"))?,
                memory: n.memory.unwrap_or(memory),
                preboot_tampers: Vec::new(),
            });
        }
        for t in &self.tamper {
            let node = nodes
                .iter_mut()
                .find(|n| n.uuid == *t.node.get_ref())
                .ok_or_else(|| cx.err(&t.node, format!("tamper names unknown node {}", t.node.get_ref())))?;
            let stage = node
                .stages
                .iter()
                .find(|s| s.name() == t.stage.get_ref())
                .ok_or_else(|| cx.err(&t.stage, format!("node {} has no stage {}", node.uuid, t.stage.get_ref())))?;
            if t.position >= stage.payload().len() {
                return Err(cx.err(
                    &t.stage,
                    format!(
                        "tamper position {} is past the end of {} ({} bytes)",
                        t.position,
                        stage.name(),
                        stage.payload().len()
                    ),
                ));
            }
            node.preboot_tampers
                .push((t.stage.get_ref().clone(), t.position, t.value));
        }
        if nodes.is_empty() {
            return Err(ConfigError::general("fleet has no nodes"));
        }

        let mut spec = FleetSpec::with_nodes(nodes);
        if let Some(r) = &f.vlan_range {
            let [lo, hi] = *r.get_ref();
            if lo > hi || lo == 0 || hi > 4094 {
                return Err(cx.err(r, format!("vlan_range [{lo}, {hi}] is not within 1..=4094")));
            }
            spec.vlan_range = (lo, hi);
        }
        if let Some(p) = f.poll_interval {
            if p == 0 {
                return Err(ConfigError::general("poll_interval must be at least 1"));
            }
            spec.poll_interval = p;
        }
        spec.base_image = match &f.base_image {
            Some(s) => cx.payload(s)?,
            None => default_base_image(f.base_image_size.unwrap_or(DEFAULT_BASE_IMAGE_SIZE)),
        };
        if spec.base_image.is_empty() {
            return Err(ConfigError::general("base image is empty"));
        }
        if let Some(k) = &f.tenant_kernel {
            let payload = cx.payload(k)?;
            spec.tenant_kernel = Stage::new(
                spec.tenant_kernel.name(),
                payload,
                spec.tenant_kernel.pcr(),
                spec.tenant_kernel.origin(),
            )
            .map_err(|e| cx.err(k, e.to_string()))?;
            spec.whitelist = crate::orchestrator::default_whitelist(&spec.tenant_kernel);
        }
        if let Some(w) = &f.whitelist_file {
            let path = match base_dir {
                Some(d) => d.join(w.get_ref()),
                None => PathBuf::from(w.get_ref()),
            };
            let wtext = std::fs::read_to_string(&path)
                .map_err(|e| cx.err(w, format!("{}: {e}", path.display())))?;
            spec.whitelist = Whitelist::parse(&wtext)
                .map_err(|e| cx.err(w, format!("{}: {e}", path.display())))?;
        }
        for w in &self.whitelist {
            let kind = cx.firmware(&w.firmware)?;
            let stages = cx.stages(kind, &w.stages, &format!("whitelist {}", w.name))?;
            spec.whitelist.insert_stages(w.name.clone(), &stages);
            if w.with_kernel {
                spec.whitelist.insert_stages(
                    runtime_policy(&w.name),
                    stages.iter().chain(std::iter::once(&spec.tenant_kernel)),
                );
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_and_explicit_nodes() {
        let text = r#"
[fleet]
nodes = 2
memory = 4096

[[node]]
uuid = "old"
firmware = "stock-uefi"
stages = { uefi = "text:uefi image v0\n" }
"#;
        let spec = parse_fleet(text, None).unwrap();
        let uuids: Vec<_> = spec.nodes.iter().map(|n| n.uuid.as_str()).collect();
        assert_eq!(uuids, ["node-00", "node-01", "old"]);
        assert_eq!(spec.nodes[0].memory, 4096);
        assert_eq!(spec.nodes[2].firmware, FirmwareKind::StockUefi);
        assert_eq!(spec.nodes[2].stages[0].payload(), b"uefi image v0\n");
    }

    #[test]
    fn duplicate_uuid_names_uuid_and_line() {
        let text = "[fleet]\nnodes = 1\n\n[[node]]\nuuid = \"node-00\"\n";
        let e = parse_fleet(text, None).unwrap_err();
        assert_eq!(e.line, Some(5));
        assert!(e.to_string().contains("node-00"), "{e}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_fleet("[fleet]\nnodes = 2\nfirmware = heads\n", None).unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = parse_fleet("[fleet]\nnodes = 2\ncolour = 1\n", None).unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn tamper_validation() {
        let text = "[fleet]\nnodes = 1\n[[tamper]]\nnode = \"node-00\"\nstage = \"ipxe\"\nposition = 1\nvalue = 1\n";
        let e = parse_fleet(text, None).unwrap_err();
        assert_eq!(e.line, Some(5));
        let text = "[fleet]\nnodes = 1\n[[tamper]]\nnode = \"node-00\"\nstage = \"acm\"\nposition = 1\nvalue = 1\n";
        let spec = parse_fleet(text, None).unwrap();
        assert_eq!(spec.nodes[0].preboot_tampers, [("acm".to_string(), 1, 1)]);
    }

    #[test]
    fn payload_forms() {
        assert_eq!(parse_payload("text:ab", None).unwrap(), b"ab");
        assert_eq!(parse_payload("hex:61 62", None).unwrap(), b"ab");
        assert!(parse_payload("ab", None).is_err());
        assert!(parse_payload("file:/nonexistent/x", None).is_err());
    }

    #[test]
    fn whitelist_override_replaces_entry() {
        let text = r#"
[fleet]
nodes = 1
[[whitelist]]
name = "uefi-default"
firmware = "stock-uefi"
stages = { uefi = "text:uefi image v2\n" }
"#;
        let spec = parse_fleet(text, None).unwrap();
        let default = crate::orchestrator::default_whitelist(&spec.tenant_kernel);
        assert_ne!(spec.whitelist.get("uefi-default"), default.get("uefi-default"));
        assert_ne!(spec.whitelist.get("uefi-default+os"), default.get("uefi-default+os"));
        assert_eq!(spec.whitelist.get("heads-default"), default.get("heads-default"));
    }
}
