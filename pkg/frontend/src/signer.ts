/**
 * Client-side signing session.
 *
 * The key lives in WebCrypto (persisted as a JWK in localStorage when a
 * browser hosts us); only the compressed public key and signatures ever
 * leave the client. Signature format matches the chain: raw 64-byte (r, s)
 * over SHA-256, ECDSA P-256.
 */

import { Doc, canonicalEncode, toHex } from "./codec.js";

const ALGO: EcKeyGenParams = { name: "ECDSA", namedCurve: "P-256" };
const SIGN: EcdsaParams = { name: "ECDSA", hash: "SHA-256" };

export interface SessionProfile {
  pkHex: string;
  nodeEndpoint: string;
  sign(body: Doc): Promise<string>; // hex of the raw 64-byte signature
  exportKey(): Promise<JsonWebKey>;
}

function compressPublicKey(raw: Uint8Array): Uint8Array {
  // raw uncompressed point: 0x04 || x (32) || y (32)
  if (raw.length !== 65 || raw[0] !== 0x04) {
    throw new Error("unexpected public key export format");
  }
  const x = raw.slice(1, 33);
  const yIsOdd = (raw[64] & 1) === 1;
  const out = new Uint8Array(33);
  out[0] = yIsOdd ? 0x03 : 0x02;
  out.set(x, 1);
  return out;
}

async function profileFrom(
  keyPair: CryptoKeyPair,
  nodeEndpoint: string,
): Promise<SessionProfile> {
  const rawPk = new Uint8Array(await crypto.subtle.exportKey("raw", keyPair.publicKey));
  const pkHex = toHex(compressPublicKey(rawPk));
  return {
    pkHex,
    nodeEndpoint,
    async sign(body: Doc): Promise<string> {
      const payload = canonicalEncode(body);
      const sig = await crypto.subtle.sign(
        SIGN,
        keyPair.privateKey,
        payload.buffer.slice(payload.byteOffset, payload.byteOffset + payload.byteLength) as ArrayBuffer,
      );
      return toHex(new Uint8Array(sig)); // WebCrypto emits P1363 r||s, 64 bytes
    },
    async exportKey(): Promise<JsonWebKey> {
      return crypto.subtle.exportKey("jwk", keyPair.privateKey);
    },
  };
}

export async function newSession(nodeEndpoint: string): Promise<SessionProfile> {
  const keyPair = (await crypto.subtle.generateKey(ALGO, true, [
    "sign",
    "verify",
  ])) as CryptoKeyPair;
  return profileFrom(keyPair, nodeEndpoint);
}

export async function sessionFromJwk(
  jwk: JsonWebKey,
  nodeEndpoint: string,
): Promise<SessionProfile> {
  const privateKey = await crypto.subtle.importKey("jwk", jwk, ALGO, true, ["sign"]);
  const publicJwk: JsonWebKey = { kty: jwk.kty, crv: jwk.crv, x: jwk.x, y: jwk.y };
  const publicKey = await crypto.subtle.importKey("jwk", publicJwk, ALGO, true, [
    "verify",
  ]);
  return profileFrom({ privateKey, publicKey }, nodeEndpoint);
}
