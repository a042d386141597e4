import { describe, expect, it } from "vitest";

import { geofenceSvg, traceModel, verdictBadgeClass, violationSvg } from "../src/render.js";

const AUDIT_FIXTURE = {
  ok: true,
  trail: {
    cid: "02aa-1",
    found: true,
    entries: [
      {
        height: 4,
        tx_index: 0,
        tx: {
          msg: { op: "create", caller: "02aa" },
          script: { events: ["created by owner 02aa"] },
          tokoin: { owner: "02aa", holder: "02aa", is_valid: true },
        },
      },
      {
        height: 6,
        tx_index: 0,
        tx: {
          msg: { op: "transfer", caller: "02aa" },
          script: { events: ["holder 02aa -> 03bb"] },
          tokoin: { owner: "02aa", holder: "03bb", is_valid: true },
        },
      },
      {
        height: 9,
        tx_index: 0,
        tx: {
          msg: {
            op: "redeem_finalize",
            caller: "03cc",
            verdict: {
              outcome: "OVER-PRIVILEGED PATTERN",
              evidence_digest: "ff".repeat(32),
              violation_pattern: { w: 8, h: 2, rows: "c000" },
            },
          },
          script: { events: ["verdict OVER-PRIVILEGED PATTERN"] },
          tokoin: { owner: "02aa", holder: "03bb", is_valid: true },
        },
      },
    ],
  },
};

describe("trace rendering", () => {
  it("builds a timeline with holder changes and the verdict", () => {
    const model = traceModel(AUDIT_FIXTURE);
    expect(model.found).toBe(true);
    expect(model.entries.map((e) => e.op)).toEqual(["create", "transfer", "redeem_finalize"]);
    expect(model.entries.map((e) => e.height)).toEqual([4, 6, 9]);
    expect(model.holders).toEqual(["02aa", "03bb"]);
    expect(model.verdict?.outcome).toBe("OVER-PRIVILEGED PATTERN");
    expect(model.verdict?.violation).toBeDefined();
  });

  it("unknown coins come back not-found", () => {
    const model = traceModel({ ok: true, trail: { cid: "x-1", found: false, entries: [] } });
    expect(model.found).toBe(false);
    expect(model.entries).toEqual([]);
  });

  it("verdicts map to badge classes", () => {
    expect(verdictBadgeClass("SUCCESS")).toBe("badge-success");
    expect(verdictBadgeClass("OVERTIME")).toBe("badge-overtime");
    expect(verdictBadgeClass("OVER-PRIVILEGED PATTERN")).toBe("badge-violation");
    expect(verdictBadgeClass("CONDITION-FAIL")).toBe("badge-fail");
  });

  it("renders the violation bitmap to SVG cells", () => {
    // rows c000: first row has bits at x=0 and x=1 only
    const svg = violationSvg({ w: 8, h: 2, rows: "c000" });
    expect(svg).toContain("<svg");
    const rects = svg.match(/<rect x=/g) ?? [];
    expect(rects).toHaveLength(2);
    expect(svg).toContain('x="0" y="0"');
    expect(svg).toContain('x="4" y="0"');
  });

  it("renders the abstract geofence map with holder markers", () => {
    const svg = geofenceSvg(
      { where: { lat: 38.8997, lon: -77.0486, radius_m: 80 } },
      3,
    );
    expect(svg).toContain("38.8997");
    expect(svg).toContain("r=80m");
    expect((svg.match(/#\d<\/text>/g) ?? []).length).toBe(3);
  });
});
