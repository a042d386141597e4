/**
 * Canonical key-value document encoding, byte-compatible with the node.
 *
 * Rules: JSON surface, object keys sorted, no insignificant whitespace,
 * integral numbers as plain decimals, byte strings (Uint8Array) as lowercase
 * hex text, UTF-8 output. null/undefined are not encodable: optional fields
 * are omitted. Signatures are computed over exactly these bytes.
 */

export type Doc =
  | string
  | number
  | boolean
  | Uint8Array
  | Doc[]
  | { [key: string]: Doc };

export class EncodingError extends Error {}

export function toHex(bytes: Uint8Array): string {
  let out = "";
  for (const b of bytes) out += b.toString(16).padStart(2, "0");
  return out;
}

export function fromHex(hex: string): Uint8Array {
  if (hex.length % 2 !== 0 || /[^0-9a-fA-F]/.test(hex)) {
    throw new EncodingError(`not a hex string: ${hex.slice(0, 16)}...`);
  }
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(i * 2, i * 2 + 2), 16);
  }
  return out;
}

function writeValue(value: Doc, out: string[]): void {
  if (value === null || value === undefined) {
    throw new EncodingError("null is not encodable; omit the field instead");
  }
  if (typeof value === "boolean") {
    out.push(value ? "true" : "false");
  } else if (typeof value === "number") {
    if (!Number.isFinite(value)) throw new EncodingError("non-finite number");
    // integral values print as integers in both languages; non-integral
    // shortest-representation reprs agree for the value ranges in use
    out.push(Number.isInteger(value) ? String(value) : String(value));
  } else if (typeof value === "string") {
    out.push(JSON.stringify(value));
  } else if (value instanceof Uint8Array) {
    out.push('"' + toHex(value) + '"');
  } else if (Array.isArray(value)) {
    out.push("[");
    value.forEach((item, i) => {
      if (i) out.push(",");
      writeValue(item, out);
    });
    out.push("]");
  } else if (typeof value === "object") {
    const keys = Object.keys(value).sort();
    out.push("{");
    keys.forEach((key, i) => {
      if (i) out.push(",");
      out.push(JSON.stringify(key), ":");
      writeValue((value as { [k: string]: Doc })[key], out);
    });
    out.push("}");
  } else {
    throw new EncodingError(`unencodable value of type ${typeof value}`);
  }
}

export function canonicalEncode(doc: Doc): Uint8Array {
  const parts: string[] = [];
  writeValue(doc, parts);
  return new TextEncoder().encode(parts.join(""));
}

export async function sha256(data: Uint8Array): Promise<Uint8Array> {
  const digest = await crypto.subtle.digest(
    "SHA-256",
    data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength) as ArrayBuffer,
  );
  return new Uint8Array(digest);
}

export async function docDigestHex(doc: Doc): Promise<string> {
  return toHex(await sha256(canonicalEncode(doc)));
}
