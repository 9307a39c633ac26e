//! Edge integration: an adapter wired to a gateway converts records in the
//! organization's format without going through the carrier link.

use super::wire::{RawRecord, SourceRecord, WireFormat};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAdapter {
    pub org_id: String,
    pub platform_id: String,
    pub format: WireFormat,
    /// Whether the co-located gateway is up.
    pub gateway_alive: bool,
}

/// Converts local records at the edge. Nothing comes out of a dead gateway.
pub fn edge_integrate(adapter: &EdgeAdapter, local_records: &[SourceRecord], at: Timestamp) -> Vec<RawRecord> {
    if !adapter.gateway_alive {
        return Vec::new();
    }
    local_records
        .iter()
        .map(|r| RawRecord {
            org_id: adapter.org_id.clone(),
            source_format: adapter.format,
            fields: adapter.format.fields(r),
            received_at: at,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::{ChannelModel, EnergyCosts};
    use crate::sim::channel::{transmit, CostLedger};
    use crate::sim::energy::Battery;
    use crate::sim::rng::substream;
    use crate::time::DEFAULT_EPOCH;

    fn records() -> Vec<SourceRecord> {
        (0..2)
            .map(|i| SourceRecord {
                sensor_id: format!("s{i}"),
                platform_id: "mesh1".into(),
                parameter: "temperature".into(),
                unit: "Cel".into(),
                measured_at: DEFAULT_EPOCH,
                value: "9.8".into(),
                lat: 41.0,
                lon: -8.7,
                depth_m: 20.0,
            })
            .collect()
    }

    fn adapter(alive: bool) -> EdgeAdapter {
        EdgeAdapter {
            org_id: "org8".into(),
            platform_id: "mesh1".into(),
            format: WireFormat::XmlV1,
            gateway_alive: alive,
        }
    }

    #[test]
    fn edge_bypasses_carrier_cost() {
        let ledger = CostLedger::default();
        let out = edge_integrate(&adapter(true), &records(), DEFAULT_EPOCH);
        assert_eq!(out.len(), 2);
        assert_eq!(ledger.cost, 0.0);
        assert_eq!(out[0].get("sensor").unwrap().to_string(), "s0");

        // the same two records over the carrier link cost something
        let mut ledger = CostLedger::default();
        let mut b = Battery::new(10.0);
        for r in &records() {
            let payload = WireFormat::XmlV1.encode(&[WireFormat::XmlV1.fields(r)]);
            transmit(
                &mut b,
                &EnergyCosts::default(),
                &ChannelModel::ota(),
                payload.len(),
                DEFAULT_EPOCH,
                &mut substream(1, "gw"),
                &mut ledger,
            )
            .unwrap();
        }
        assert!(ledger.cost > 0.0);
    }

    #[test]
    fn dead_gateway_yields_nothing() {
        assert!(edge_integrate(&adapter(false), &records(), DEFAULT_EPOCH).is_empty());
    }
}
