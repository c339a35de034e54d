use aal_mqtt::codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, Connack,
    Connect, ConnectReturnCode, Packet, Publish, QoS, Suback, SubackCode, Subscribe, Unsubscribe,
    MAX_REMAINING_LENGTH,
};
use bytes::{Bytes, BytesMut};
use proptest::prelude::*;
use rumqttc::mqttbytes::v4 as reference;

fn level() -> impl Strategy<Value = String> {
    "[a-z0-9_]{0,6}"
}

fn topic_name() -> impl Strategy<Value = String> {
    prop::collection::vec(level(), 1..5)
        .prop_map(|levels| levels.join("/"))
        .prop_filter("nonempty", |t| !t.is_empty())
}

fn topic_filter() -> impl Strategy<Value = String> {
    (
        prop::collection::vec(prop_oneof![level(), Just("+".to_string())], 1..4),
        any::<bool>(),
    )
        .prop_map(|(mut levels, hash)| {
            if hash {
                levels.push("#".into());
            }
            levels.join("/")
        })
        .prop_filter("nonempty", |f| !f.is_empty())
}

fn packet_id() -> impl Strategy<Value = u16> {
    1..=u16::MAX
}

fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

fn publish() -> impl Strategy<Value = Publish> {
    (
        topic_name(),
        qos(),
        any::<bool>(),
        any::<bool>(),
        packet_id(),
        prop::collection::vec(any::<u8>(), 0..300),
    )
        .prop_map(|(topic, qos, retain, dup, id, payload)| {
            let qos1 = qos == QoS::AtLeastOnce;
            Publish {
                dup: dup && qos1,
                qos,
                retain,
                topic,
                packet_id: qos1.then_some(id),
                payload: Bytes::from(payload),
            }
        })
}

fn packet() -> impl Strategy<Value = Packet> {
    let return_code = prop_oneof![
        Just(ConnectReturnCode::Accepted),
        Just(ConnectReturnCode::UnacceptableProtocolVersion),
        Just(ConnectReturnCode::IdentifierRejected),
        Just(ConnectReturnCode::ServerUnavailable),
        Just(ConnectReturnCode::BadUsernameOrPassword),
        Just(ConnectReturnCode::NotAuthorized),
    ];
    let suback_code = prop_oneof![
        Just(SubackCode::Granted(QoS::AtMostOnce)),
        Just(SubackCode::Granted(QoS::AtLeastOnce)),
        Just(SubackCode::Granted(QoS::ExactlyOnce)),
        Just(SubackCode::Failure),
    ];
    let requested = prop_oneof![
        Just(QoS::AtMostOnce),
        Just(QoS::AtLeastOnce),
        Just(QoS::ExactlyOnce)
    ];
    prop_oneof![
        ("[a-zA-Z0-9-]{0,23}", any::<bool>(), any::<u16>()).prop_map(
            |(client_id, clean_session, keep_alive)| Packet::Connect(Connect {
                client_id,
                clean_session,
                keep_alive
            })
        ),
        (any::<bool>(), return_code).prop_map(|(present, code)| Packet::Connack(Connack {
            session_present: present && code == ConnectReturnCode::Accepted,
            code
        })),
        publish().prop_map(Packet::Publish),
        packet_id().prop_map(|packet_id| Packet::Puback { packet_id }),
        (
            packet_id(),
            prop::collection::vec((topic_filter(), requested), 1..5)
        )
            .prop_map(|(packet_id, filters)| Packet::Subscribe(Subscribe {
                packet_id,
                filters
            })),
        (packet_id(), prop::collection::vec(suback_code, 1..5))
            .prop_map(|(packet_id, codes)| Packet::Suback(Suback { packet_id, codes })),
        (packet_id(), prop::collection::vec(topic_filter(), 1..5)).prop_map(
            |(packet_id, filters)| Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        ),
        packet_id().prop_map(|packet_id| Packet::Unsuback { packet_id }),
        Just(Packet::Pingreq),
        Just(Packet::Pingresp),
        Just(Packet::Disconnect),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        let (decoded, used) = decode_packet(&bytes).unwrap().unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(decoded, p);
    }

    #[test]
    fn streaming_is_chunking_independent(
        packets in prop::collection::vec(packet(), 1..8),
        cuts in prop::collection::vec(1usize..64, 0..20),
    ) {
        let mut wire = Vec::new();
        for p in &packets {
            wire.extend(encode_packet(p).unwrap());
        }
        let mut buf = Vec::new();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut chunks = cuts.into_iter();
        while pos < wire.len() {
            let step = chunks.next().unwrap_or(wire.len());
            let end = (pos + step).min(wire.len());
            buf.extend_from_slice(&wire[pos..end]);
            pos = end;
            while let Some((p, used)) = decode_packet(&buf).unwrap() {
                buf.drain(..used);
                out.push(p);
            }
        }
        prop_assert!(buf.is_empty());
        prop_assert_eq!(out, packets);
    }

    #[test]
    fn decode_is_total(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        if let Ok(Some((p, used))) = decode_packet(&bytes) {
            prop_assert!(used <= bytes.len());
            prop_assert_eq!(encode_packet(&p).unwrap(), bytes[..used].to_vec());
        }
    }

    #[test]
    fn remaining_length_round_trip(n in 0usize..=MAX_REMAINING_LENGTH) {
        let bytes = encode_remaining_length(n).unwrap();
        let expected_len = match n {
            0..=127 => 1,
            128..=16_383 => 2,
            16_384..=2_097_151 => 3,
            _ => 4,
        };
        prop_assert_eq!(bytes.len(), expected_len);
        prop_assert_eq!(decode_remaining_length(&bytes).unwrap(), Some((n, expected_len)));
    }

    /// A third-party decoder reads our PUBLISH frames identically.
    #[test]
    fn reference_decoder_agrees_on_publish(p in publish()) {
        let mut wire = BytesMut::from(&encode_packet(&Packet::Publish(p.clone())).unwrap()[..]);
        let decoded = reference::Packet::read(&mut wire, 1 << 20).unwrap();
        let reference::Packet::Publish(r) = decoded else {
            panic!("reference decoded {decoded:?}");
        };
        prop_assert_eq!(&r.topic, &p.topic);
        prop_assert_eq!(&r.payload[..], &p.payload[..]);
        prop_assert_eq!(r.qos as u8, p.qos as u8);
        prop_assert_eq!(r.retain, p.retain);
        prop_assert_eq!(r.dup, p.dup);
        prop_assert_eq!(r.pkid, p.packet_id.unwrap_or(0));
    }
}

/// Frames written by the reference encoder decode to the same packet here.
#[test]
fn reference_encoder_frames_decode() {
    let mut wire = BytesMut::new();
    reference::Packet::Publish(reference::Publish::new(
        "a/b",
        rumqttc::QoS::AtMostOnce,
        "hi",
    ))
    .write(&mut wire, 1 << 20)
    .unwrap();
    assert_eq!(
        &wire[..],
        &[0x30, 0x07, 0x00, 0x03, b'a', b'/', b'b', b'h', b'i']
    );
    let ours = encode_packet(&Packet::Publish(Publish {
        dup: false,
        qos: QoS::AtMostOnce,
        retain: false,
        topic: "a/b".into(),
        packet_id: None,
        payload: Bytes::from_static(b"hi"),
    }))
    .unwrap();
    assert_eq!(&wire[..], &ours[..]);

    let mut wire = BytesMut::new();
    let mut sub = reference::Subscribe::new("home/#", rumqttc::QoS::AtLeastOnce);
    sub.pkid = 9;
    reference::Packet::Subscribe(sub).write(&mut wire, 1 << 20).unwrap();
    let (decoded, used) = decode_packet(&wire).unwrap().unwrap();
    assert_eq!(used, wire.len());
    assert_eq!(
        decoded,
        Packet::Subscribe(Subscribe {
            packet_id: 9,
            filters: vec![("home/#".into(), QoS::AtLeastOnce)]
        })
    );

    let mut wire = BytesMut::new();
    reference::Packet::PingReq.write(&mut wire, 16).unwrap();
    assert_eq!(decode_packet(&wire).unwrap(), Some((Packet::Pingreq, 2)));
}
