/**
 * Ledger message construction and 4W1H policy form validation.
 *
 * Documents mirror the node's wire schema exactly; anything that fails
 * validation here never reaches the network.
 */

import { Doc } from "./codec.js";
import { SessionProfile } from "./signer.js";

export interface PolicyForm {
  groupN: string; // accumulator public triple, hex
  groupG: string;
  groupValue: string;
  resourceId: string;
  action: string;
  startS: number;
  endS: number;
  lat: number;
  lon: number;
  radiusM: number;
  actions: string[];
  allowedRegion: string;
  maxDurationS: number;
  graceS: number;
  uses: number;
}

export interface FieldError {
  field: string;
  message: string;
}

const HEX = /^[0-9a-f]+$/i;

export function validatePolicyForm(form: PolicyForm): FieldError[] {
  const errors: FieldError[] = [];
  const err = (field: string, message: string) => errors.push({ field, message });

  for (const [field, value] of [
    ["groupN", form.groupN],
    ["groupG", form.groupG],
    ["groupValue", form.groupValue],
  ] as const) {
    if (!value || !HEX.test(value)) err(field, "subject group values must be hex");
  }
  if (!form.resourceId) err("resourceId", "a resource id is required");
  if (!form.action) err("action", "an action is required");
  if (!Number.isFinite(form.startS) || !Number.isFinite(form.endS)) {
    err("when", "start and end must be timestamps");
  } else if (form.startS >= form.endS) {
    err("when", "the time window must start before it ends");
  }
  if (!(form.lat >= -90 && form.lat <= 90)) err("lat", "latitude out of range");
  if (!(form.lon >= -180 && form.lon <= 180)) err("lon", "longitude out of range");
  if (!(form.radiusM > 0)) err("radiusM", "the geofence radius must be positive");
  if (!form.actions.length) err("actions", "the procedure needs at least one action");
  if (!(form.maxDurationS > 0)) err("maxDurationS", "the procedure time budget must be positive");
  if (!(form.graceS >= 0)) err("graceS", "grace must be zero or more seconds");
  if (!Number.isInteger(form.uses) || form.uses < 1) err("uses", "at least one use");
  return errors;
}

const FULL_CONDITION: Doc = {
  op: "AND",
  children: [
    { leaf: "SubjectInGroup" },
    { leaf: "TimeInWindow" },
    { leaf: "GeoWithinRadius" },
    { leaf: "ResourceMatch" },
  ],
};

export function policyDoc(form: PolicyForm): Doc {
  return {
    who: { n: form.groupN.toLowerCase(), g: form.groupG.toLowerCase(), value: form.groupValue.toLowerCase() },
    what: { resource_id: form.resourceId, action: form.action },
    when: { start: Math.floor(form.startS), end: Math.floor(form.endS) },
    where: { lat: form.lat, lon: form.lon, radius_m: form.radiusM },
    how: {
      actions: form.actions,
      allowed_region: form.allowedRegion,
      max_duration_s: form.maxDurationS,
      grace_s: form.graceS,
    },
    condition: FULL_CONDITION,
    uses_remaining: form.uses,
  };
}

export interface MessageFields {
  owner: string; // hex pk of the coin owner
  tId: number;
  op: "register" | "create" | "transfer" | "modify" | "revoke";
  policy?: Doc;
  pkNext?: string;
  reg?: Doc;
}

/** Build, sign client-side, and return the wire document. */
export async function buildMessage(
  session: SessionProfile,
  nonce: number,
  fields: MessageFields,
): Promise<{ [k: string]: Doc }> {
  const body: { [k: string]: Doc } = {
    caller: session.pkHex,
    owner: fields.owner,
    t_id: fields.tId,
    op: fields.op,
    nonce,
  };
  if (fields.policy !== undefined) body.policy = fields.policy;
  if (fields.pkNext !== undefined) body.pk_next = fields.pkNext;
  if (fields.reg !== undefined) body.reg = fields.reg;
  const sig = await session.sign(body);
  return { ...body, sig };
}

export function compositeId(ownerHex: string, tId: number): string {
  return `${ownerHex}-${tId}`;
}
