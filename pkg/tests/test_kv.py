"""Toy key-value application."""

from permsmr.kv import ClientOp, KVStore, OpKind, kv_apply, parse_payload


def test_put_then_get():
    store = KVStore()
    first = store.apply(0, ClientOp(1, OpKind.PUT, "a", "1").payload)
    assert not first.found
    second = store.apply(1, ClientOp(2, OpKind.PUT, "a", "2").payload)
    assert second.found and second.value == "1"
    got = store.apply(2, ClientOp(3, OpKind.GET, "a").payload)
    assert got.value == "2"
    assert store.snapshot() == {"a": "2"}


def test_get_missing_key():
    response = kv_apply(KVStore(), ClientOp(1, OpKind.GET, "nope").payload)
    assert not response.found and response.value == ""


def test_duplicate_op_answered_from_cache():
    store = KVStore()
    payload = ClientOp(5, OpKind.PUT, "k", "x").payload
    first = store.apply(0, payload)
    store.apply(1, ClientOp(6, OpKind.PUT, "k", "y").payload)
    again = store.apply(2, payload)
    assert again == first
    assert store.snapshot() == {"k": "y"}


def test_malformed_payload():
    store = KVStore()
    response = store.apply(0, b"\xff\xfe")
    assert response.error and response.op_id is None
    assert parse_payload(b"P|x|k|v") is None
    assert parse_payload(b"G|3|k") == ClientOp(3, OpKind.GET, "k")
