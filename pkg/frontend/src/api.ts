/**
 * Node HTTP client: the console's only source of truth.
 *
 * Consumes exactly GET /tokoin/{id}, GET /audit/{id}, POST /tx,
 * GET /events (server-sent events via streaming fetch, which works in both
 * browsers and node), and GET /status.
 */

import { Doc, canonicalEncode } from "./codec.js";

export interface SubmitResult {
  ok: boolean;
  tx_hash?: string;
  code?: string;
  detail?: string;
}

export type CommitEvent = {
  height: number;
  tx_index: number;
  tx_hash: string;
  op: string;
  cid: string;
  caller: string;
  events: string[];
  tx: any;
};

export class NodeApi {
  constructor(public endpoint: string) {}

  private url(path: string): string {
    return this.endpoint.replace(/\/$/, "") + path;
  }

  async status(pk?: string): Promise<any> {
    const q = pk ? `?pk=${pk}` : "";
    const resp = await fetch(this.url(`/status${q}`));
    return resp.json();
  }

  async tokoin(cid: string): Promise<any> {
    const resp = await fetch(this.url(`/tokoin/${cid}`));
    return resp.json();
  }

  async audit(cid: string): Promise<any> {
    const resp = await fetch(this.url(`/audit/${cid}`));
    return resp.json();
  }

  async submit(msgDoc: Doc): Promise<SubmitResult> {
    const body = canonicalEncode(msgDoc);
    const resp = await fetch(this.url("/tx"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: body.buffer.slice(body.byteOffset, body.byteOffset + body.byteLength) as ArrayBuffer,
    });
    return (await resp.json()) as SubmitResult;
  }

  /**
   * Ordered committed-transaction stream. Returns a stop function; the
   * onError callback fires when the node goes away (offline handling).
   */
  subscribe(
    fromHeight: number,
    onEvent: (event: CommitEvent) => void,
    onError?: (err: unknown) => void,
    filter?: string,
  ): () => void {
    const controller = new AbortController();
    const params = new URLSearchParams({ from: String(fromHeight) });
    if (filter) params.set("filter", filter);
    (async () => {
      try {
        const resp = await fetch(this.url(`/events?${params}`), {
          signal: controller.signal,
        });
        if (!resp.body) throw new Error("no event stream body");
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        let buffer = "";
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          buffer += decoder.decode(value, { stream: true });
          let sep;
          while ((sep = buffer.indexOf("\n\n")) >= 0) {
            const chunk = buffer.slice(0, sep);
            buffer = buffer.slice(sep + 2);
            for (const line of chunk.split("\n")) {
              if (line.startsWith("data: ")) {
                onEvent(JSON.parse(line.slice(6)) as CommitEvent);
              }
            }
          }
        }
        onError?.(new Error("event stream ended"));
      } catch (err) {
        if (!controller.signal.aborted) onError?.(err);
      }
    })();
    return () => controller.abort();
  }

  /** Wait until a submitted transaction lands in a block. */
  async waitCommit(
    txHash: string,
    fromHeight: number,
    timeoutMs = 15000,
  ): Promise<CommitEvent> {
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        stop();
        reject(new Error(`timed out waiting for commit of ${txHash}`));
      }, timeoutMs);
      const stop = this.subscribe(
        fromHeight,
        (event) => {
          if (event.tx_hash === txHash) {
            clearTimeout(timer);
            stop();
            resolve(event);
          }
        },
        (err) => {
          clearTimeout(timer);
          reject(err);
        },
      );
    });
  }
}
