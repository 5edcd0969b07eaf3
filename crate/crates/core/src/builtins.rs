//! Network configurations shipped with the crate. See `assets/README.md`.

use crate::error::{Result, SimError};
use crate::netmodel::NetworkSpec;

const ASSETS: &[(&str, &str)] = &[
    ("mbconv-demo", include_str!("../assets/mbconv-demo.json")),
    ("pyconv-demo", include_str!("../assets/pyconv-demo.json")),
    ("replk-demo", include_str!("../assets/replk-demo.json")),
    ("mobilenetv2", include_str!("../assets/mobilenetv2.json")),
    ("resnet50", include_str!("../assets/resnet50.json")),
    ("replknet31", include_str!("../assets/replknet31.json")),
    (
        "pyconvresnet50",
        include_str!("../assets/pyconvresnet50.json"),
    ),
];

/// Small single-purpose networks used by the demos and `verify`.
pub const DEMO_NAMES: [&str; 3] = ["mbconv-demo", "pyconv-demo", "replk-demo"];

pub fn names() -> impl Iterator<Item = &'static str> {
    ASSETS.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    ASSETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load(name: &str) -> Result<NetworkSpec> {
    let text = source(name).ok_or_else(|| {
        SimError::Schema(format!(
            "unknown builtin `{name}` (available: {})",
            names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    NetworkSpec::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_parses_and_round_trips() {
        for name in names() {
            let net = load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(net.name, name);
            assert_eq!(NetworkSpec::from_json(&net.to_json()).unwrap(), net);
        }
        assert!(load("nope").is_err());
    }
}
