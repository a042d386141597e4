import { describe, expect, it } from "vitest";

import { EncodingError, canonicalEncode, fromHex, toHex } from "../src/codec.js";

const text = (doc: any) => new TextDecoder().decode(canonicalEncode(doc));

describe("canonical encoding", () => {
  // expected strings are frozen from the node's own encoder
  it("matches the node byte-for-byte on mixed documents", () => {
    expect(
      text({ b: 2, a: [1, "x", { k: fromHex("0102") }], c: 3.5 }),
    ).toBe('{"a":[1,"x",{"k":"0102"}],"b":2,"c":3.5}');
    expect(text({ n: 10, blob: fromHex("abcd"), s: "hi", t: true })).toBe(
      '{"blob":"abcd","n":10,"s":"hi","t":true}',
    );
  });

  it("prints integral floats as plain integers, like the node", () => {
    expect(
      text({ radius_m: 80.0, lat: 38.8997, lon: -77.0486, max: 20.0, zero: 0.0 }),
    ).toBe('{"lat":38.8997,"lon":-77.0486,"max":20,"radius_m":80,"zero":0}');
  });

  it("handles unicode, escapes, negatives, and big safe integers", () => {
    expect(
      text({ neg: -1.5, big: 9007199254740991, txt: '日本語 ok\n"quoted"', flag: false }),
    ).toBe('{"big":9007199254740991,"flag":false,"neg":-1.5,"txt":"日本語 ok\\n\\"quoted\\""}');
  });

  it("sorts keys recursively", () => {
    expect(
      text({
        when: { start: 14 * 3600, end: 15 * 3600 },
        uses_remaining: 1,
        actions: ["unlock", "drop", "lock"],
      }),
    ).toBe(
      '{"actions":["unlock","drop","lock"],"uses_remaining":1,"when":{"end":54000,"start":50400}}',
    );
  });

  it("rejects null and non-finite numbers", () => {
    expect(() => canonicalEncode({ x: null as any })).toThrow(EncodingError);
    expect(() => canonicalEncode({ x: Number.NaN })).toThrow(EncodingError);
    expect(() => canonicalEncode({ x: Infinity })).toThrow(EncodingError);
  });

  it("hex helpers round trip", () => {
    const bytes = new Uint8Array([0, 1, 0xab, 0xff]);
    expect(toHex(bytes)).toBe("0001abff");
    expect(Array.from(fromHex("0001abff"))).toEqual(Array.from(bytes));
    expect(() => fromHex("xyz")).toThrow(EncodingError);
  });
});
