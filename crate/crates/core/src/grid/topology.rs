//! Plain-text topology files.
//!
//! ```text
//! # comments start with '#'
//! version,1
//! base,400,100000          # V_base (line-to-line volts), S_base (VA)
//! slack,R0,1.0             # id, voltage p.u.
//! node,R1                  # one record per load node
//! line,R0,R1,0.0032,0.0124 # from, to, R_ohm, X_ohm
//! ```
//!
//! The `version` record must come first. Records may otherwise appear in
//! any order; trailing `#` comments are allowed on every record.

use std::fmt::Write as _;
use std::path::Path;

use super::{Base, GridError, LineSpec, Network, Node, NodeKind};

pub const TOPOLOGY_VERSION: u32 = 1;

const CIGRE_LV_RESIDENTIAL: &str = include_str!("../../fixtures/cigre_lv_residential.topo");

/// The CIGRE LV residential feeder (R0 slack, R1..R18) bundled with the crate.
pub fn cigre_lv_residential() -> Network {
    parse_topology(CIGRE_LV_RESIDENTIAL).expect("bundled topology parses")
}

pub fn parse_topology(text: &str) -> Result<Network, GridError> {
    let mut version_seen = false;
    let mut base = None;
    let mut slack_v = None;
    let mut nodes = Vec::new();
    let mut lines = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        let err = |reason: &str| GridError::Parse { line: lineno, reason: reason.to_string() };
        let num = |s: &str| -> Result<f64, GridError> {
            s.parse::<f64>().map_err(|_| err(&format!("`{s}` is not a number")))
        };
        if !version_seen {
            if fields.first() != Some(&"version") {
                return Err(err("first record must be `version`"));
            }
            if fields.len() != 2 || fields[1] != TOPOLOGY_VERSION.to_string() {
                return Err(err(&format!("unsupported version, expected {TOPOLOGY_VERSION}")));
            }
            version_seen = true;
            continue;
        }
        match fields[0] {
            "base" if fields.len() == 3 => {
                base = Some(Base { v_base: num(fields[1])?, s_base: num(fields[2])? });
            }
            "slack" if fields.len() == 3 => {
                if slack_v.is_some() {
                    return Err(err("more than one slack record"));
                }
                nodes.push(Node { id: fields[1].to_string(), kind: NodeKind::Slack });
                slack_v = Some(num(fields[2])?);
            }
            "node" if fields.len() == 2 => {
                nodes.push(Node { id: fields[1].to_string(), kind: NodeKind::Load });
            }
            "line" if fields.len() == 5 => lines.push(LineSpec {
                from: fields[1].to_string(),
                to: fields[2].to_string(),
                r_ohm: num(fields[3])?,
                x_ohm: num(fields[4])?,
            }),
            other => return Err(err(&format!("malformed `{other}` record"))),
        }
    }

    if !version_seen {
        return Err(GridError::Parse { line: 0, reason: "empty topology file".into() });
    }
    let base = base.ok_or(GridError::Parse { line: 0, reason: "missing `base` record".into() })?;
    let slack_v =
        slack_v.ok_or(GridError::Parse { line: 0, reason: "missing `slack` record".into() })?;
    Network::new(nodes, &lines, base, slack_v)
}

pub fn read_topology(path: &Path) -> Result<Network, GridError> {
    let text = std::fs::read_to_string(path).map_err(|e| GridError::Parse {
        line: 0,
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_topology(&text)
}

/// Serialises a network back to the text format. Lines are written in their
/// stored (slack-outward) orientation.
pub fn write_topology(net: &Network) -> String {
    let base = net.base();
    let z = base.z_base();
    let mut out = String::new();
    let _ = writeln!(out, "version,{TOPOLOGY_VERSION}");
    let _ = writeln!(out, "base,{},{}", base.v_base, base.s_base);
    for node in net.nodes() {
        match node.kind {
            NodeKind::Slack => {
                let _ = writeln!(out, "slack,{},{}", node.id, net.slack_voltage());
            }
            NodeKind::Load => {
                let _ = writeln!(out, "node,{}", node.id);
            }
        }
    }
    for br in net.branches() {
        let _ = writeln!(
            out,
            "line,{},{},{},{}",
            net.nodes()[br.parent].id,
            net.nodes()[br.child].id,
            br.r * z,
            br.x * z
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# test feeder
version,1
base,400,100000
slack,S,1.0
node,A   # first
node,B
line,S,A,0.016,0.008
line,B,A,0.032,0.0
";

    #[test]
    fn parses_and_converts_to_per_unit() {
        let net = parse_topology(SMALL).unwrap();
        assert_eq!(net.node_count(), 3);
        assert!((net.branches()[0].r - 0.01).abs() < 1e-15);
        assert!((net.branches()[1].r - 0.02).abs() < 1e-15);
        assert_eq!(net.branches()[1].parent, net.index_of("A").unwrap());
    }

    #[test]
    fn round_trips() {
        let net = parse_topology(SMALL).unwrap();
        let again = parse_topology(&write_topology(&net)).unwrap();
        assert_eq!(net.nodes(), again.nodes());
        for (a, b) in net.branches().iter().zip(again.branches()) {
            assert!((a.r - b.r).abs() < 1e-15 && (a.x - b.x).abs() < 1e-15);
        }
    }

    #[test]
    fn reports_line_numbers() {
        let bad = SMALL.replace("0.032", "abc");
        match parse_topology(&bad) {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_topology("node,A\n"),
            Err(GridError::Parse { line: 1, .. })
        ));
        assert!(parse_topology("version,2\n").is_err());
    }

    #[test]
    fn bundled_feeder() {
        let net = cigre_lv_residential();
        assert_eq!(net.node_count(), 19);
        assert_eq!(net.branches().len(), 18);
        assert_eq!(net.nodes()[net.slack()].id, "R0");
        let r18 = net.index_of("R18").unwrap();
        let path: Vec<&str> = net.path_to_slack(r18).iter().map(|&i| net.nodes()[i].id.as_str()).collect();
        assert_eq!(path.first(), Some(&"R18"));
        assert_eq!(path.last(), Some(&"R0"));
        // transformer: 0.0032 ohm on a 1.6 ohm base
        assert!((net.branches()[net.feeder(net.index_of("R1").unwrap()).unwrap()].r - 0.002).abs() < 1e-12);
    }
}
