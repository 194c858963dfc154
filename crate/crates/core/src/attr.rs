//! Resource attributes and their three-layer resolution.
//!
//! Every attribute has a compiled default. The runtime configuration layer
//! (attributes passed to `runtime_init` over `LCI_*` environment variables)
//! overrides it, and arguments given to an allocation call override both.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{bad_arg, Result};
use crate::frame::HEADER_LEN;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttrValue {
    Int(i64),
    Bool(bool),
    Str(String),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AttrValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Bool(v) => write!(f, "{v}"),
            AttrValue::Str(v) => f.write_str(v),
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<usize> for AttrValue {
    fn from(v: usize) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<u32> for AttrValue {
    fn from(v: u32) -> Self {
        AttrValue::Int(v.into())
    }
}

impl From<i32> for AttrValue {
    fn from(v: i32) -> Self {
        AttrValue::Int(v.into())
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

/// Ordered attribute name → value map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttrSet(BTreeMap<String, AttrValue>);

impl AttrSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: impl Into<AttrValue>) {
        self.0.insert(name.to_owned(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&AttrValue> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AttrValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn lookup(&self, name: &str) -> Result<AttrValue> {
        self.get(name)
            .cloned()
            .ok_or_else(|| bad_arg(format!("unknown attribute {name:?}")))
    }

    pub(crate) fn int(&self, name: &str) -> i64 {
        self.get(name)
            .and_then(AttrValue::as_int)
            .unwrap_or_default()
    }

    pub(crate) fn usize(&self, name: &str) -> usize {
        self.int(name) as usize
    }

    pub(crate) fn bool(&self, name: &str) -> bool {
        self.get(name)
            .and_then(AttrValue::as_bool)
            .unwrap_or_default()
    }

    pub(crate) fn str(&self, name: &str) -> &str {
        self.get(name)
            .and_then(AttrValue::as_str)
            .unwrap_or_default()
    }
}

impl<K: AsRef<str>, V: Into<AttrValue>> FromIterator<(K, V)> for AttrSet {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut set = AttrSet::new();
        for (k, v) in iter {
            set.set(k.as_ref(), v);
        }
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Runtime,
    Device,
    PacketPool,
    MatchingEngine,
    CompletionQueue,
    Synchronizer,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int { min: i64, max: i64 },
    Bool,
    Enum(&'static [&'static str]),
    Str,
}

#[derive(Debug, Clone, Copy)]
enum Default {
    Int(i64),
    Bool(bool),
    Str(&'static str),
}

#[derive(Debug)]
struct Spec {
    name: &'static str,
    scopes: &'static [Scope],
    kind: Kind,
    default: Default,
    env: &'static str,
}

const fn int(min: i64, max: i64) -> Kind {
    Kind::Int { min, max }
}

static SPECS: &[Spec] = &[
    Spec {
        name: "transport",
        scopes: &[Scope::Runtime, Scope::Device],
        kind: Kind::Enum(&["loopback", "tcp"]),
        default: Default::Str("loopback"),
        env: "LCI_TRANSPORT",
    },
    Spec {
        name: "nranks",
        scopes: &[Scope::Runtime],
        kind: int(1, 65535),
        default: Default::Int(1),
        env: "LCI_NRANKS",
    },
    Spec {
        name: "rank",
        scopes: &[Scope::Runtime],
        kind: int(0, 65534),
        default: Default::Int(0),
        env: "LCI_RANK",
    },
    Spec {
        name: "hosts",
        scopes: &[Scope::Runtime],
        kind: Kind::Str,
        default: Default::Str(""),
        env: "LCI_HOSTS",
    },
    Spec {
        name: "tcp_port_base",
        scopes: &[Scope::Runtime],
        kind: int(1, 65535),
        default: Default::Int(8460),
        env: "LCI_TCP_PORT_BASE",
    },
    Spec {
        name: "alloc_default_resources",
        scopes: &[Scope::Runtime],
        kind: Kind::Bool,
        default: Default::Bool(true),
        env: "LCI_ALLOC_DEFAULT",
    },
    Spec {
        name: "connect_timeout_ms",
        scopes: &[Scope::Runtime],
        kind: int(1, i64::MAX),
        default: Default::Int(30_000),
        env: "LCI_CONNECT_TIMEOUT_MS",
    },
    Spec {
        name: "max_progress_batch",
        scopes: &[Scope::Device],
        kind: int(1, 1 << 20),
        default: Default::Int(64),
        env: "LCI_MAX_PROGRESS_BATCH",
    },
    Spec {
        name: "outbound_queue_depth",
        scopes: &[Scope::Device],
        kind: int(1, 1 << 20),
        default: Default::Int(1024),
        env: "LCI_OUTBOUND_QUEUE_DEPTH",
    },
    Spec {
        name: "packet_size",
        scopes: &[Scope::PacketPool],
        kind: int(HEADER_LEN as i64 + 64, 1 << 24),
        default: Default::Int(8192),
        env: "LCI_PACKET_SIZE",
    },
    Spec {
        name: "packet_count",
        scopes: &[Scope::PacketPool],
        kind: int(1, 1 << 24),
        default: Default::Int(1024),
        env: "LCI_PACKET_COUNT",
    },
    Spec {
        name: "match_engine",
        scopes: &[Scope::MatchingEngine],
        kind: Kind::Enum(&["queue", "map"]),
        default: Default::Str("map"),
        env: "LCI_MATCH_ENGINE",
    },
    Spec {
        name: "match_policy",
        scopes: &[Scope::MatchingEngine],
        kind: Kind::Enum(&["none", "rank_only", "tag_only", "rank_tag", "custom"]),
        default: Default::Str("rank_tag"),
        env: "LCI_MATCH_POLICY",
    },
    Spec {
        name: "capacity",
        scopes: &[Scope::CompletionQueue],
        kind: int(1, 1 << 26),
        default: Default::Int(65536),
        env: "LCI_CQ_CAPACITY",
    },
    Spec {
        name: "threshold",
        scopes: &[Scope::Synchronizer],
        kind: int(1, 1 << 26),
        default: Default::Int(1),
        env: "LCI_SYNC_THRESHOLD",
    },
];

fn spec(name: &str) -> Option<&'static Spec> {
    SPECS.iter().find(|s| s.name == name)
}

/// Names of the attributes a resource kind accepts.
pub fn attribute_names(scope: Scope) -> Vec<&'static str> {
    SPECS
        .iter()
        .filter(|s| s.scopes.contains(&scope))
        .map(|s| s.name)
        .collect()
}

/// Environment variable that overrides the compiled default of `name`.
pub fn env_var(name: &str) -> Option<&'static str> {
    spec(name).map(|s| s.env)
}

fn check(spec: &Spec, value: &AttrValue) -> Result<()> {
    let ok = match (spec.kind, value) {
        (Kind::Int { min, max }, AttrValue::Int(v)) => (min..=max).contains(v),
        (Kind::Bool, AttrValue::Bool(_)) => true,
        (Kind::Enum(choices), AttrValue::Str(s)) => choices.contains(&s.as_str()),
        (Kind::Str, AttrValue::Str(_)) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(bad_arg(format!(
            "invalid value {value} for attribute {:?}",
            spec.name
        )))
    }
}

fn parse(spec: &Spec, raw: &str) -> Result<AttrValue> {
    let raw = raw.trim();
    let value = match spec.kind {
        Kind::Int { .. } => AttrValue::Int(
            raw.parse()
                .map_err(|_| bad_arg(format!("{}={raw:?} is not an integer", spec.env)))?,
        ),
        Kind::Bool => AttrValue::Bool(match raw {
            "1" | "true" | "yes" | "on" => true,
            "0" | "false" | "no" | "off" => false,
            _ => return Err(bad_arg(format!("{}={raw:?} is not a boolean", spec.env))),
        }),
        Kind::Enum(_) | Kind::Str => AttrValue::Str(raw.to_owned()),
    };
    check(spec, &value)?;
    Ok(value)
}

fn default_value(spec: &Spec) -> AttrValue {
    match spec.default {
        Default::Int(v) => AttrValue::Int(v),
        Default::Bool(v) => AttrValue::Bool(v),
        Default::Str(v) => AttrValue::Str(v.to_owned()),
    }
}

/// Where `LCI_*` variables are read from.
#[derive(Debug, Clone, PartialEq, Eq, std::default::Default)]
pub enum EnvSource {
    #[default]
    Process,
    Map(HashMap<String, String>),
}

impl EnvSource {
    pub fn map<K: Into<String>, V: Into<String>>(vars: impl IntoIterator<Item = (K, V)>) -> Self {
        EnvSource::Map(
            vars.into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        )
    }

    fn get(&self, key: &str) -> Option<String> {
        match self {
            EnvSource::Process => std::env::var(key).ok(),
            EnvSource::Map(m) => m.get(key).cloned(),
        }
    }
}

/// The configuration layer shared by all allocations of one runtime.
#[derive(Debug, Clone, std::default::Default)]
pub(crate) struct Config {
    layer: AttrSet,
}

impl Config {
    pub(crate) fn new(init: &AttrSet, env: &EnvSource) -> Result<Config> {
        let mut layer = AttrSet::new();
        for s in SPECS {
            if let Some(raw) = env.get(s.env) {
                layer.set(s.name, parse(s, &raw)?);
            }
        }
        for (name, value) in init.iter() {
            let s = spec(name).ok_or_else(|| bad_arg(format!("unknown attribute {name:?}")))?;
            check(s, value)?;
            layer.set(name, value.clone());
        }
        Ok(Config { layer })
    }

    /// Fully resolved attribute set for one allocation of `scope`.
    pub(crate) fn resolve(&self, scope: Scope, explicit: &AttrSet) -> Result<AttrSet> {
        for (name, value) in explicit.iter() {
            match spec(name) {
                Some(s) if s.scopes.contains(&scope) => check(s, value)?,
                _ => return Err(bad_arg(format!("unknown attribute {name:?} for {scope:?}"))),
            }
        }
        let mut out = AttrSet::new();
        for s in SPECS.iter().filter(|s| s.scopes.contains(&scope)) {
            let value = explicit
                .get(s.name)
                .or_else(|| self.layer.get(s.name))
                .cloned()
                .unwrap_or_else(|| default_value(s));
            out.set(s.name, value);
        }
        Ok(out)
    }
}
