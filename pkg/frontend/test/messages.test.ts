import { describe, expect, it } from "vitest";

import { PolicyForm, buildMessage, policyDoc, validatePolicyForm } from "../src/messages.js";
import { newSession } from "../src/signer.js";

function validForm(): PolicyForm {
  return {
    groupN: "ab12",
    groupG: "cd34",
    groupValue: "ef56",
    resourceId: "front-door",
    action: "in-home-delivery",
    startS: 50400,
    endS: 54000,
    lat: 38.8997,
    lon: -77.0486,
    radiusM: 80,
    actions: ["unlock", "drop", "lock"],
    allowedRegion: "sha256:mask",
    maxDurationS: 300,
    graceS: 60,
    uses: 1,
  };
}

describe("policy form validation", () => {
  it("accepts a complete 4W1H form", () => {
    expect(validatePolicyForm(validForm())).toEqual([]);
  });

  it("flags an end-before-start window inline", () => {
    const form = { ...validForm(), startS: 54000, endS: 50400 };
    const errors = validatePolicyForm(form);
    expect(errors.some((e) => e.field === "when")).toBe(true);
  });

  it("flags every broken section at once", () => {
    const form = {
      ...validForm(),
      groupN: "not hex!",
      radiusM: 0,
      actions: [],
      uses: 0,
      lat: 123,
    };
    const fields = validatePolicyForm(form).map((e) => e.field);
    expect(fields).toContain("groupN");
    expect(fields).toContain("radiusM");
    expect(fields).toContain("actions");
    expect(fields).toContain("uses");
    expect(fields).toContain("lat");
  });

  it("nothing is submitted when validation fails (caller contract)", () => {
    // the app only calls buildMessage after validatePolicyForm returns [];
    // mirror that contract here
    const errors = validatePolicyForm({ ...validForm(), endS: 0 });
    expect(errors.length).toBeGreaterThan(0);
  });
});

describe("message building", () => {
  it("produces a signed wire document with opcode-matched fields", async () => {
    const session = await newSession("http://localhost");
    const msg = await buildMessage(session, 0, {
      owner: session.pkHex,
      tId: 1,
      op: "create",
      policy: policyDoc(validForm()),
    });
    expect(msg.op).toBe("create");
    expect(msg.caller).toBe(session.pkHex);
    expect(msg.sig).toHaveLength(128);
    expect((msg.policy as any).when).toEqual({ start: 50400, end: 54000 });
    expect((msg.policy as any).condition.op).toBe("AND");
  });
});
