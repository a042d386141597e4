/**
 * Pure view models and SVG rendering for the trace view.
 *
 * The timeline, verdict badge, violation-pattern image, and the abstract
 * geofence map are all computed from audit documents alone, so they can be
 * tested without a DOM.
 */

export interface TimelineEntry {
  height: number;
  op: string;
  caller: string;
  summary: string;
}

export interface VerdictView {
  outcome: string; // SUCCESS | OVERTIME | OVER-PRIVILEGED PATTERN | CONDITION-FAIL
  reasons: string[];
  evidenceDigest: string;
  violation?: { w: number; h: number; rows: string };
}

export interface TraceModel {
  found: boolean;
  cid: string;
  entries: TimelineEntry[];
  verdict?: VerdictView;
  holders: string[]; // holder change chain, in commit order
}

export function traceModel(auditResponse: any): TraceModel {
  const trail = auditResponse?.trail;
  if (!trail || !trail.found) {
    return { found: false, cid: trail?.cid ?? "", entries: [], holders: [] };
  }
  const entries: TimelineEntry[] = [];
  const holders: string[] = [];
  let verdict: VerdictView | undefined;
  for (const entry of trail.entries) {
    const msg = entry.tx.msg;
    entries.push({
      height: entry.height,
      op: msg.op,
      caller: msg.caller,
      summary: (entry.tx.script.events ?? []).join("; "),
    });
    const tokoin = entry.tx.tokoin;
    if (tokoin && holders[holders.length - 1] !== tokoin.holder) {
      holders.push(tokoin.holder);
    }
    if (msg.op === "redeem_finalize" && msg.verdict) {
      verdict = {
        outcome: msg.verdict.outcome,
        reasons: msg.verdict.reasons ?? [],
        evidenceDigest: msg.verdict.evidence_digest,
        violation: msg.verdict.violation_pattern,
      };
    }
  }
  return { found: true, cid: trail.cid, entries, verdict, holders };
}

export function verdictBadgeClass(outcome: string): string {
  if (outcome === "SUCCESS") return "badge-success";
  if (outcome === "OVERTIME") return "badge-overtime";
  if (outcome === "OVER-PRIVILEGED PATTERN") return "badge-violation";
  return "badge-fail";
}

function unpackBitmapRows(rowsHex: string, w: number, h: number): boolean[][] {
  const rowBytes = Math.ceil(w / 8);
  const grid: boolean[][] = [];
  for (let y = 0; y < h; y++) {
    const row: boolean[] = [];
    for (let x = 0; x < w; x++) {
      const byte = parseInt(
        rowsHex.slice((y * rowBytes + (x >> 3)) * 2, (y * rowBytes + (x >> 3)) * 2 + 2),
        16,
      );
      row.push(((byte >> (7 - (x & 7))) & 1) === 1);
    }
    grid.push(row);
  }
  return grid;
}

/** Render an accumulated motion bitmap as an SVG image, cell = 4px. */
export function violationSvg(
  violation: { w: number; h: number; rows: string },
  cell = 4,
): string {
  const grid = unpackBitmapRows(violation.rows, violation.w, violation.h);
  const rects: string[] = [];
  for (let y = 0; y < violation.h; y++) {
    for (let x = 0; x < violation.w; x++) {
      if (grid[y][x]) {
        rects.push(
          `<rect x="${x * cell}" y="${y * cell}" width="${cell}" height="${cell}" fill="#d32f2f"/>`,
        );
      }
    }
  }
  const w = violation.w * cell;
  const h = violation.h * cell;
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${w} ${h}" width="${w}" height="${h}">` +
    `<rect width="${w}" height="${h}" fill="#1a1a2e"/>` +
    rects.join("") +
    `</svg>`
  );
}

/**
 * Abstract map: the geofence circle plus holder-change markers spread along
 * a path (no map tiles; positions are schematic unless events carry them).
 */
export function geofenceSvg(policy: any, holderCount: number): string {
  const size = 240;
  const c = size / 2;
  const radius = 70;
  const marks: string[] = [];
  for (let i = 0; i < holderCount; i++) {
    const angle = Math.PI * (1.25 - (i / Math.max(holderCount - 1, 1)) * 0.5);
    const r = size * 0.46 - (i / Math.max(holderCount - 1, 1)) * (size * 0.46 - radius * 0.3);
    const x = c + Math.cos(angle) * r;
    const y = c + Math.sin(angle) * r;
    marks.push(`<circle cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="5" fill="#4fc3f7"/>`);
    marks.push(
      `<text x="${(x + 8).toFixed(1)}" y="${(y + 4).toFixed(1)}" font-size="9" fill="#eee">#${i + 1}</text>`,
    );
  }
  const lat = policy?.where?.lat ?? 0;
  const lon = policy?.where?.lon ?? 0;
  const radiusM = policy?.where?.radius_m ?? 0;
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${size} ${size}" width="${size}" height="${size}">` +
    `<rect width="${size}" height="${size}" fill="#10101c"/>` +
    `<circle cx="${c}" cy="${c}" r="${radius}" fill="rgba(102,187,106,0.15)" stroke="#66bb6a"/>` +
    `<circle cx="${c}" cy="${c}" r="3" fill="#66bb6a"/>` +
    `<text x="${c}" y="${c + radius + 14}" font-size="9" fill="#aaa" text-anchor="middle">` +
    `${lat.toFixed(4)}, ${lon.toFixed(4)} r=${radiusM}m</text>` +
    marks.join("") +
    `</svg>`
  );
}
