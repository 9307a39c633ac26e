use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use iout_core::broker::{encode_packet, publish_packet, try_decode, QoS, TopicPath};
use iout_core::model::{observation_id, QcReport, SchemaVersion};
use iout_core::qc::{QcConfig, QcEngine, SensorInfo};
use iout_core::scenario::{load_scenario, run, RunOverrides};
use iout_core::{DataCategory, Location, Millis, Observation, Timestamp};

fn codec(c: &mut Criterion) {
    let topic = TopicPath::new("data/open_access/org7/p1/temperature").unwrap();
    let packet = publish_packet(&topic, &[7u8; 256], QoS::ExactlyOnce, 42);
    let bytes = encode_packet(&packet).unwrap();
    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode_publish_256", |b| b.iter(|| encode_packet(black_box(&packet)).unwrap()));
    g.bench_function("decode_publish_256", |b| b.iter(|| try_decode(black_box(&bytes)).unwrap()));
    g.finish();
}

const LOC: Location = Location {
    lat: 41.0,
    lon: -8.7,
    depth_m: 5.0,
};

fn reading(i: i64) -> Observation {
    let t = Timestamp(1_704_067_200_000) + Millis(i * 600_000);
    Observation {
        schema_version: SchemaVersion,
        observation_id: observation_id("org7", "s1", t),
        org_id: "org7".into(),
        platform_id: "p1".into(),
        sensor_id: "s1".into(),
        parameter: "temperature".into(),
        unit: "Cel".into(),
        value: Some(14.0 + (i as f64 * 0.05).sin()),
        measured_at: t,
        ingested_at: t,
        location: LOC,
        qc: QcReport::not_evaluated(),
        category: DataCategory::default(),
        lineage: Vec::new(),
    }
    .append_lineage("transform", t, "bench")
    .unwrap()
}

fn qc(c: &mut Criterion) {
    const N: i64 = 1_000;
    let readings: Vec<Observation> = (0..N).map(reading).collect();
    let mut g = c.benchmark_group("qc");
    g.throughput(Throughput::Elements(N as u64));
    g.bench_function("process_1000_readings", |b| {
        b.iter_batched(
            || {
                let mut e = QcEngine::new(QcConfig::default());
                e.register(
                    SensorInfo {
                        sensor_id: "s1".into(),
                        org_id: "org7".into(),
                        platform_id: "p1".into(),
                        parameter: "temperature".into(),
                        unit: "Cel".into(),
                        location: LOC,
                        expected_interval_s: 600.0,
                        valid_min: -2.0,
                        valid_max: 35.0,
                        active_until: None,
                    },
                    readings[0].measured_at,
                );
                (e, readings.clone())
            },
            |(mut e, rs)| {
                for r in rs {
                    let now = r.measured_at;
                    black_box(e.process(r, now, &[]));
                }
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn scenario(c: &mut Criterion) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios");
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);
    for name in ["org7.json", "combined.json"] {
        let cfg = load_scenario(&dir.join(name)).unwrap();
        g.bench_function(name, |b| b.iter(|| run(black_box(&cfg), &RunOverrides::default()).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, codec, qc, scenario);
criterion_main!(benches);
