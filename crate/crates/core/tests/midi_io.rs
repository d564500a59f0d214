use pianocover::midi::{
    parse_smf, tempo_microseconds, tick_seconds, write_smf, Note, SecondsSequence,
};
use proptest::prelude::*;

/// Tick-aligned sequences with no same-pitch overlap.
fn tick_sequence() -> impl Strategy<Value = (SecondsSequence, u16, f64)> {
    let tpq = prop_oneof![Just(96u16), Just(480u16), Just(960u16)];
    let bpm = prop_oneof![Just(120.0), Just(90.0), Just(137.0)];
    let notes = prop::collection::vec(
        (0u8..128, 0u64..2000, 1u64..500, 1u8..128, 0u64..300),
        0..40,
    );
    (tpq, bpm, notes, 0u64..400).prop_map(|(tpq, bpm, raw, tail)| {
        let us = tempo_microseconds(bpm).unwrap();
        let mut next_free = [0u64; 128];
        let mut notes = Vec::new();
        let mut end = 0;
        for (pitch, gap, len, vel, _) in raw {
            let on = next_free[pitch as usize] + gap;
            let off = on + len;
            next_free[pitch as usize] = off;
            end = end.max(off);
            notes.push(Note::new(
                pitch,
                tick_seconds(on, tpq, us),
                tick_seconds(off, tpq, us),
                vel,
            ));
        }
        let seq = SecondsSequence::new(notes, tick_seconds(end + tail, tpq, us)).unwrap();
        (seq, tpq, bpm)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn write_then_parse_is_identity((seq, tpq, bpm) in tick_sequence()) {
        let bytes = write_smf(&seq, tpq, bpm).unwrap();
        let parsed = parse_smf(&bytes).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(parsed.sequence, seq);
    }

    #[test]
    fn writer_is_a_fixed_point((seq, tpq, bpm) in tick_sequence()) {
        let bytes = write_smf(&seq, tpq, bpm).unwrap();
        let again = write_smf(&parse_smf(&bytes).unwrap().sequence, tpq, bpm).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = parse_smf(&bytes);
    }

    #[test]
    fn mutated_files_never_panic((seq, tpq, bpm) in tick_sequence(), edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8)) {
        let mut bytes = write_smf(&seq, tpq, bpm).unwrap();
        for (pos, val) in edits {
            let n = bytes.len();
            bytes[pos % n] = val;
        }
        let _ = parse_smf(&bytes);
    }
}
