//! Organization wire formats.
//!
//! JsonV1 (org-7 style):
//! `{"records":[{"sid":"s1","pid":"p1","par":"temperature","unit":"Cel",
//!   "t":"2024-01-01T00:00:00Z","v":"9.8","lat":41.1,"lon":-8.7,"dep":5}]}`
//!
//! XmlV1 (org-8 style):
//! `<batch><rec sensor="s1" station="p1" quantity="temperature" uom="Cel"
//!   time="2024-01-01T00:00:00Z" value="9.8" latitude="41.1"
//!   longitude="-8.7" depth="5"/></batch>`
//!
//! Parsers keep field names verbatim and leave typing to the transform stage.

use std::collections::BTreeMap;
use std::fmt;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WireFormat {
    JsonV1,
    XmlV1,
}

impl WireFormat {
    /// Guesses the format from the first non-whitespace byte.
    pub fn sniff(payload: &[u8]) -> Option<WireFormat> {
        match payload.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'{') => Some(WireFormat::JsonV1),
            Some(b'<') => Some(WireFormat::XmlV1),
            _ => None,
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            WireFormat::JsonV1 => "application/json",
            WireFormat::XmlV1 => "application/xml",
        }
    }

    pub fn parse(self, org_id: &str, payload: &[u8], received_at: Timestamp) -> Result<Vec<RawRecord>, UnparseablePayload> {
        match self {
            WireFormat::JsonV1 => parse_json(org_id, payload, received_at),
            WireFormat::XmlV1 => parse_xml(org_id, payload, received_at),
        }
    }

    pub fn encode(self, records: &[Fields]) -> Vec<u8> {
        match self {
            WireFormat::JsonV1 => encode_json(records),
            WireFormat::XmlV1 => encode_xml(records),
        }
    }

    pub fn vocabulary(self) -> &'static Vocabulary {
        match self {
            WireFormat::JsonV1 => &JSON_V1_VOCAB,
            WireFormat::XmlV1 => &XML_V1_VOCAB,
        }
    }

    /// Encodes one logical record in this format's vocabulary.
    pub fn fields(self, r: &SourceRecord) -> Fields {
        let v = self.vocabulary();
        let num = |x: f64| match self {
            WireFormat::JsonV1 => Scalar::Number(x),
            WireFormat::XmlV1 => Scalar::Text(format_number(x)),
        };
        let mut f = Fields::new();
        f.insert(v.sensor_id.into(), Scalar::Text(r.sensor_id.clone()));
        f.insert(v.platform_id.into(), Scalar::Text(r.platform_id.clone()));
        f.insert(v.parameter.into(), Scalar::Text(r.parameter.clone()));
        f.insert(v.unit.into(), Scalar::Text(r.unit.clone()));
        f.insert(v.measured_at.into(), Scalar::Text(r.measured_at.to_rfc3339()));
        f.insert(v.value.into(), Scalar::Text(r.value.clone()));
        f.insert(v.lat.into(), num(r.lat));
        f.insert(v.lon.into(), num(r.lon));
        f.insert(v.depth_m.into(), num(r.depth_m));
        f
    }
}

impl fmt::Display for WireFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WireFormat::JsonV1 => "JsonV1",
            WireFormat::XmlV1 => "XmlV1",
        })
    }
}

/// Source field names a format uses for each canonical field.
#[derive(Debug)]
pub struct Vocabulary {
    pub sensor_id: &'static str,
    pub platform_id: &'static str,
    pub parameter: &'static str,
    pub unit: &'static str,
    pub measured_at: &'static str,
    pub value: &'static str,
    pub lat: &'static str,
    pub lon: &'static str,
    pub depth_m: &'static str,
}

pub static JSON_V1_VOCAB: Vocabulary = Vocabulary {
    sensor_id: "sid",
    platform_id: "pid",
    parameter: "par",
    unit: "unit",
    measured_at: "t",
    value: "v",
    lat: "lat",
    lon: "lon",
    depth_m: "dep",
};

pub static XML_V1_VOCAB: Vocabulary = Vocabulary {
    sensor_id: "sensor",
    platform_id: "station",
    parameter: "quantity",
    unit: "uom",
    measured_at: "time",
    value: "value",
    lat: "latitude",
    lon: "longitude",
    depth_m: "depth",
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Text(String),
    Number(f64),
    Bool(bool),
    Null,
}

impl Scalar {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Text(s) => f.write_str(s),
            Scalar::Number(n) => f.write_str(&format_number(*n)),
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Null => f.write_str("null"),
        }
    }
}

/// Shortest decimal text that parses back to `x`.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub type Fields = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub org_id: String,
    pub source_format: WireFormat,
    pub fields: Fields,
    pub received_at: Timestamp,
}

impl RawRecord {
    pub fn get(&self, name: &str) -> Option<&Scalar> {
        self.fields.get(name)
    }
}

/// A record as a producer knows it, before choosing a wire format.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub sensor_id: String,
    pub platform_id: String,
    pub parameter: String,
    pub unit: String,
    pub measured_at: Timestamp,
    /// Decimal text, e.g. "9.8".
    pub value: String,
    pub lat: f64,
    pub lon: f64,
    pub depth_m: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable payload at byte {offset}: {reason}")]
pub struct UnparseablePayload {
    pub offset: usize,
    pub reason: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBatch {
    records: Vec<Fields>,
}

#[derive(Serialize)]
struct JsonBatchOut<'a> {
    records: &'a [Fields],
}

fn line_col_to_offset(payload: &[u8], line: usize, col: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in payload.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + col.saturating_sub(1)).min(payload.len());
        }
        offset += l.len() + 1;
    }
    payload.len()
}

pub fn parse_json(org_id: &str, payload: &[u8], received_at: Timestamp) -> Result<Vec<RawRecord>, UnparseablePayload> {
    let batch: JsonBatch = serde_json::from_slice(payload).map_err(|e| UnparseablePayload {
        offset: line_col_to_offset(payload, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    Ok(batch
        .records
        .into_iter()
        .map(|fields| RawRecord {
            org_id: org_id.to_owned(),
            source_format: WireFormat::JsonV1,
            fields,
            received_at,
        })
        .collect())
}

pub fn encode_json(records: &[Fields]) -> Vec<u8> {
    serde_json::to_vec(&JsonBatchOut { records }).expect("scalars serialize")
}

fn xml_err(offset: u64, reason: impl Into<String>) -> UnparseablePayload {
    UnparseablePayload {
        offset: offset as usize,
        reason: reason.into(),
    }
}

fn rec_fields(e: &BytesStart<'_>, offset: u64) -> Result<Fields, UnparseablePayload> {
    let mut fields = Fields::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| xml_err(offset, err.to_string()))?;
        let key = std::str::from_utf8(attr.key.as_ref())
            .map_err(|_| xml_err(offset, "attribute name is not UTF-8"))?
            .to_owned();
        let value = attr
            .unescape_value()
            .map_err(|err| xml_err(offset, err.to_string()))?
            .into_owned();
        if fields.insert(key.clone(), Scalar::Text(value)).is_some() {
            return Err(xml_err(offset, format!("duplicate attribute {key}")));
        }
    }
    Ok(fields)
}

pub fn parse_xml(org_id: &str, payload: &[u8], received_at: Timestamp) -> Result<Vec<RawRecord>, UnparseablePayload> {
    let text = std::str::from_utf8(payload).map_err(|e| xml_err(e.valid_up_to() as u64, "payload is not UTF-8"))?;
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);
    let mut records = Vec::new();
    let mut in_batch = false;
    let mut closed = false;
    let push = |records: &mut Vec<RawRecord>, fields| {
        records.push(RawRecord {
            org_id: org_id.to_owned(),
            source_format: WireFormat::XmlV1,
            fields,
            received_at,
        })
    };
    loop {
        let pos = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|e| xml_err(reader.error_position(), e.to_string()))?;
        match event {
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Start(e) if !in_batch && !closed && e.name().as_ref() == b"batch" => in_batch = true,
            Event::Empty(e) if !in_batch && !closed && e.name().as_ref() == b"batch" => closed = true,
            Event::End(e) if in_batch && e.name().as_ref() == b"batch" => {
                in_batch = false;
                closed = true;
            }
            Event::Empty(e) if in_batch && e.name().as_ref() == b"rec" => {
                let fields = rec_fields(&e, pos)?;
                push(&mut records, fields);
            }
            Event::Start(e) if in_batch && e.name().as_ref() == b"rec" => {
                let fields = rec_fields(&e, pos)?;
                match reader.read_event() {
                    Ok(Event::End(end)) if end.name().as_ref() == b"rec" => push(&mut records, fields),
                    _ => return Err(xml_err(pos, "rec must not have content")),
                }
            }
            Event::Eof => break,
            Event::Text(t) if t.is_empty() => {}
            other => {
                return Err(xml_err(pos, format!("unexpected {:?}", other)));
            }
        }
    }
    if !closed {
        return Err(xml_err(text.len() as u64, "missing <batch> element"));
    }
    Ok(records)
}

fn escape_attr(s: &str) -> String {
    quick_xml::escape::escape(s).into_owned()
}

pub fn encode_xml(records: &[Fields]) -> Vec<u8> {
    let mut out = String::from("<batch>");
    for r in records {
        out.push_str("<rec");
        for (k, v) in r {
            out.push(' ');
            out.push_str(k);
            out.push_str("=\"");
            out.push_str(&escape_attr(&v.to_string()));
            out.push('"');
        }
        out.push_str("/>");
    }
    out.push_str("</batch>");
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Timestamp = Timestamp(1_704_067_200_000);

    #[test]
    fn json_example() {
        let recs = parse_json(
            "org7",
            br#"{"records":[{"sid":"s1","t":"2024-01-01T00:00:00Z","v":"9.8"}]}"#,
            T0,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        // numeric strings stay strings
        assert_eq!(recs[0].get("v"), Some(&Scalar::Text("9.8".into())));
        assert_eq!(recs[0].source_format, WireFormat::JsonV1);
    }

    #[test]
    fn xml_example() {
        let recs = parse_xml(
            "org8",
            br#"<batch><rec sid="s1" t="2024-01-01T00:00:00Z" v="9.8"/></batch>"#,
            T0,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].get("sid"), Some(&Scalar::Text("s1".into())));
    }

    #[test]
    fn json_error_offset_points_at_problem() {
        let payload = br#"{"records":[{"sid":"s1",}]}"#;
        let err = parse_json("o", payload, T0).unwrap_err();
        assert!(err.offset >= 20 && err.offset <= payload.len(), "{err:?}");
        assert!(parse_json("o", b"[]", T0).is_err());
        assert!(parse_json("o", br#"{"records":[{"a":{"b":1}}]}"#, T0).is_err());
    }

    #[test]
    fn xml_rejects_junk() {
        assert!(parse_xml("o", b"<batch><rec a='1'>", T0).is_err());
        assert!(parse_xml("o", b"<other/>", T0).is_err());
        assert!(parse_xml("o", b"", T0).is_err());
        assert!(parse_xml("o", b"<batch><rec a='1' a='2'/></batch>", T0).is_err());
        assert_eq!(parse_xml("o", b"<batch/>", T0).unwrap(), vec![]);
    }

    #[test]
    fn encode_parse_round_trip() {
        let rec = SourceRecord {
            sensor_id: "s1".into(),
            platform_id: "p&1".into(),
            parameter: "temperature".into(),
            unit: "Cel".into(),
            measured_at: T0,
            value: "9.8".into(),
            lat: 41.25,
            lon: -8.5,
            depth_m: 5.0,
        };
        for fmt in [WireFormat::JsonV1, WireFormat::XmlV1] {
            let fields = fmt.fields(&rec);
            let bytes = fmt.encode(&[fields.clone(), fields.clone()]);
            assert_eq!(WireFormat::sniff(&bytes), Some(fmt));
            let back = fmt.parse("org", &bytes, T0).unwrap();
            assert_eq!(back.len(), 2);
            assert_eq!(back[0].fields, fields);
        }
    }
}
