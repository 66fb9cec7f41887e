use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};

use pma_core::store::{read_header, write_container, Container, Tensor, TensorValues};
use proptest::prelude::*;

fn meta(step: u64) -> BTreeMap<String, String> {
    BTreeMap::from([("step".into(), step.to_string()), ("tokens".into(), (step * 7).to_string())])
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    let shape = prop::collection::vec(0usize..5, 0..4);
    (shape, any::<bool>()).prop_flat_map(|(shape, is_f32)| {
        let n: usize = shape.iter().product();
        if is_f32 {
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                .prop_map(move |v| Tensor::f32(shape.clone(), v))
                .boxed()
        } else {
            prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
                .prop_map(move |v| Tensor::f64(shape.clone(), v))
                .boxed()
        }
    })
}

fn name_strategy() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_.\"\\\\ é/-]{1,12}".prop_filter("reserved", |s| s != "__metadata__")
}

fn bits(v: &TensorValues) -> Vec<u64> {
    match v {
        TensorValues::F32(x) => x.iter().map(|f| f.to_bits() as u64).collect(),
        TensorValues::F64(x) => x.iter().map(|f| f.to_bits()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_parse_round_trip(
        tensors in prop::collection::btree_map(name_strategy(), tensor_strategy(), 1..6),
        step in 0u64..1_000_000,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pmat");
        write_container(&tensors, &meta(step), &path).unwrap();
        let on_disk = std::fs::read(&path).unwrap();
        let c = Container::open(&path).unwrap();
        let mut again = Vec::new();
        c.serialize_to(&mut again).unwrap();
        prop_assert_eq!(&on_disk, &again);
        prop_assert_eq!(c.step(), step);

        let loaded = c.load_all().unwrap();
        prop_assert_eq!(loaded.len(), tensors.len());
        for (name, t) in &tensors {
            let l = &loaded[name];
            prop_assert_eq!(&l.shape, &t.shape);
            prop_assert_eq!(bits(&l.values), bits(&t.values));
        }
    }
}

#[test]
fn zero_and_one_element_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pmat");
    let tensors = BTreeMap::from([
        ("empty".to_string(), Tensor::f32(vec![0, 3], vec![])),
        ("scalar".to_string(), Tensor::f64(vec![], vec![-0.0])),
        ("one".to_string(), Tensor::f32(vec![1], vec![f32::MIN_POSITIVE])),
    ]);
    write_container(&tensors, &meta(3), &path).unwrap();
    let c = Container::open(&path).unwrap();
    assert_eq!(c.record("empty").unwrap().byte_range.0, c.record("empty").unwrap().byte_range.1);
    assert_eq!(c.load_tensor("scalar").unwrap()[0].to_bits(), (-0.0f64).to_bits());
    let mut out = Vec::new();
    c.serialize_to(&mut out).unwrap();
    assert_eq!(out, std::fs::read(&path).unwrap());
}

struct CountingReader<R> {
    inner: R,
    read: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read += n as u64;
        Ok(n)
    }
}

impl<R: Seek> Seek for CountingReader<R> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

/// A 1 GiB tensor whose data section is a sparse hole: opening it must only
/// touch the header bytes.
#[test]
fn header_read_is_lazy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.pmat");
    let elements: u64 = 1 << 28;
    let header = format!(
        r#"{{"__metadata__":{{"step":"1","tokens":"1"}},"w":{{"dtype":"f32","offsets":[0,{}],"shape":[{}]}}}}"#,
        elements * 4,
        elements
    );
    {
        let mut f = File::create(&path).unwrap();
        f.write_all(&(header.len() as u64).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.set_len(8 + header.len() as u64 + elements * 4).unwrap();
    }
    let mut reader = CountingReader { inner: File::open(&path).unwrap(), read: 0 };
    let h = read_header(&mut reader).unwrap();
    assert_eq!(h.data_len, elements * 4);
    assert_eq!(reader.read, 8 + header.len() as u64);

    let c = Container::open(&path).unwrap();
    let mut r = c.reader().unwrap();
    let mut out = Vec::new();
    r.read_elements(c.record("w").unwrap(), elements as usize - 4, 4, &mut out).unwrap();
    assert_eq!(out, vec![0.0; 4]);
}
